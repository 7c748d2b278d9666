//! Command-line entry points: `train-base`, `triage`, `viz` and `report`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::data::Splits;
use crate::error::{Error, Result};
use crate::metrics::Threshold;
use crate::model::{ModelSpec, Network};
use crate::optim::{Hyperparams, Monitor};
use crate::persistence;
use crate::report::{self, Baseline, ResultsTable, DEFAULT_FILTERS};
use crate::train::FitReport;
use crate::triage::{
    cell_path, child_checkpoint_path, run_triage_suite, train_base, CellKey, ExperimentResult, Grid, InitScheme,
    MeanVariant, StnStart, SuiteConfig, TrainScheme, DEFAULT_COMP_EPOCHS, DEFAULT_STN_EPOCHS,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_MISSING_ARTIFACT: i32 = 2;
pub const EXIT_DATA: i32 = 3;

pub const BASELINE_CHECKPOINT: &str = "baseline.ckpt";
pub const BASELINE_METRICS: &str = "baseline.json";
pub const CELL_DIR: &str = "cells";
pub const CHILD_DIR: &str = "children";
pub const VIZ_DIR: &str = "viz";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Synth,
}

#[derive(Debug, Parser)]
#[command(name = "triage", version, about = "Deep net triage: compress one block at a time and measure recovery")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the uncompressed baseline network and save its checkpoint.
    TrainBase(RunArgs),
    /// Compress, re-initialize and retrain every requested grid cell.
    Triage(RunArgs),
    /// Dump activation maps after a block's last ReLU for several models.
    Viz(RunArgs),
    /// Collect stored cell results into CSV and JSON tables.
    Report(RunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::TrainBase(_) => "train-base",
            Command::Triage(_) => "triage",
            Command::Viz(_) => "viz",
            Command::Report(_) => "report",
        }
    }

    pub fn args(&self) -> &RunArgs {
        match self {
            Command::TrainBase(a) | Command::Triage(a) | Command::Viz(a) | Command::Report(a) => a,
        }
    }
}

/// Every flag is optional; unset flags fall back to the manifest given by
/// `--manifest`, then to the defaults.
#[derive(Debug, Default, Clone, Args)]
#[command(allow_negative_numbers = true)]
pub struct RunArgs {
    /// Rerun with the configuration recorded in a manifest file.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetKind>,
    /// Directory holding the four MNIST IDX files.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Baseline training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub cooldown: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum)]
    pub monitor: Option<Monitor>,
    #[arg(long)]
    pub comp_epochs: Option<usize>,
    #[arg(long)]
    pub stn_epochs: Option<usize>,
    /// Blocks to compress (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub blocks: Option<Vec<usize>>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub init: Option<Vec<InitScheme>>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub train: Option<Vec<TrainScheme>>,
    /// Grid cells run in parallel.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Test-split image used by `viz`.
    #[arg(long)]
    pub image_index: Option<usize>,
    /// Number of activation maps per model written by `viz`.
    #[arg(long)]
    pub filters: Option<usize>,
    /// Models rendered by `viz`: `baseline` or `<train>-<init>`, e.g. `tm-rw`.
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    #[arg(long)]
    pub hflip: Option<f64>,
    /// Use only the first N training images.
    #[arg(long)]
    pub train_limit: Option<usize>,
    #[arg(long)]
    pub synth_train: Option<usize>,
    #[arg(long)]
    pub synth_eval: Option<usize>,
    #[arg(long, value_enum)]
    pub mean_variant: Option<MeanVariant>,
    #[arg(long, value_enum)]
    pub stn_start: Option<StnStart>,
    #[arg(long, value_enum)]
    pub threshold: Option<ThresholdArg>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ThresholdArg {
    Multiplicative,
    Additive,
}

impl From<ThresholdArg> for Threshold {
    fn from(t: ThresholdArg) -> Self {
        match t {
            ThresholdArg::Multiplicative => Threshold::Multiplicative,
            ThresholdArg::Additive => Threshold::Additive,
        }
    }
}

/// Fully resolved settings of one invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub epochs: usize,
    pub hyper: Hyperparams,
    pub comp_epochs: usize,
    pub stn_epochs: usize,
    pub grid: Grid,
    pub jobs: usize,
    pub image_index: usize,
    pub filters: usize,
    pub variants: Vec<String>,
    pub hflip: f64,
    pub train_limit: Option<usize>,
    pub synth_train: usize,
    pub synth_eval: usize,
    pub mean_variant: MeanVariant,
    pub stn_start: StnStart,
    pub threshold: Threshold,
}

pub const DEFAULT_BASE_EPOCHS: usize = 15;
pub const DEFAULT_SYNTH_TRAIN: usize = 2000;
pub const DEFAULT_SYNTH_EVAL: usize = 500;
pub const DEFAULT_VARIANTS: [&str; 4] = ["baseline", "fm-stn", "tm-stn", "tm-rw"];

impl RunConfig {
    pub fn defaults(command: &str) -> Self {
        RunConfig {
            command: command.to_string(),
            dataset: DatasetKind::Mnist,
            data_dir: PathBuf::from("data/mnist"),
            out_dir: PathBuf::from("runs/default"),
            seed: 0,
            epochs: DEFAULT_BASE_EPOCHS,
            hyper: Hyperparams::default(),
            comp_epochs: DEFAULT_COMP_EPOCHS,
            stn_epochs: DEFAULT_STN_EPOCHS,
            grid: Grid::full(crate::model::MINI_VGG_CHANNELS.len()),
            jobs: 1,
            image_index: 0,
            filters: DEFAULT_FILTERS,
            variants: DEFAULT_VARIANTS.iter().map(|s| s.to_string()).collect(),
            hflip: 0.0,
            train_limit: None,
            synth_train: DEFAULT_SYNTH_TRAIN,
            synth_eval: DEFAULT_SYNTH_EVAL,
            mean_variant: MeanVariant::default(),
            stn_start: StnStart::default(),
            threshold: Threshold::default(),
        }
    }

    /// Resolves `args` over a manifest (if given) and the defaults.
    pub fn resolve(command: &str, args: &RunArgs) -> Result<Self> {
        let mut c = match &args.manifest {
            Some(path) => {
                let mut c = read_manifest(path)?.config;
                c.command = command.to_string();
                c
            }
            None => {
                let mut c = Self::defaults(command);
                if args.dataset == Some(DatasetKind::Synth) {
                    c.hflip = 0.5;
                }
                c
            }
        };
        macro_rules! set {
            ($($field:ident).+ = $value:expr) => {
                if let Some(v) = $value.clone() {
                    c.$($field).+ = v;
                }
            };
        }
        set!(dataset = args.dataset);
        set!(data_dir = args.data_dir);
        set!(out_dir = args.out_dir);
        set!(seed = args.seed);
        set!(epochs = args.epochs);
        set!(hyper.lr = args.lr);
        set!(hyper.lr_min = args.lr_min);
        set!(hyper.lr_decay = args.lr_decay);
        set!(hyper.weight_decay = args.weight_decay);
        set!(hyper.momentum = args.momentum);
        set!(hyper.patience = args.patience);
        set!(hyper.cooldown = args.cooldown);
        set!(hyper.batch_size = args.batch_size);
        set!(hyper.monitor = args.monitor);
        set!(comp_epochs = args.comp_epochs);
        set!(stn_epochs = args.stn_epochs);
        set!(grid.blocks = args.blocks);
        set!(grid.inits = args.init);
        set!(grid.trains = args.train);
        set!(jobs = args.jobs);
        set!(image_index = args.image_index);
        set!(filters = args.filters);
        set!(variants = args.variants);
        set!(hflip = args.hflip);
        set!(synth_train = args.synth_train);
        set!(synth_eval = args.synth_eval);
        set!(mean_variant = args.mean_variant);
        set!(stn_start = args.stn_start);
        if let Some(t) = args.threshold {
            c.threshold = t.into();
        }
        if args.train_limit.is_some() {
            c.train_limit = args.train_limit;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        let fail = |field: &'static str, message: &str| {
            Err(Error::Config {
                field,
                message: message.to_string(),
            })
        };
        if self.epochs == 0 {
            return fail("epochs", "must be at least 1");
        }
        if self.comp_epochs == 0 {
            return fail("comp_epochs", "must be at least 1");
        }
        if self.stn_epochs == 0 && self.grid.inits.contains(&InitScheme::STN) {
            return fail("stn_epochs", "must be at least 1 when stn is in the grid");
        }
        if self.jobs == 0 {
            return fail("jobs", "must be at least 1");
        }
        if self.filters == 0 {
            return fail("filters", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.hflip) {
            return fail("hflip", "must lie in [0, 1]");
        }
        if self.dataset == DatasetKind::Synth && (self.synth_train < 4 || self.synth_eval < 4) {
            return fail("synth_train", "synthetic splits need at least 4 images each");
        }
        if self.grid.is_empty() {
            return fail("blocks", "the requested grid is empty");
        }
        let blocks = crate::model::MINI_VGG_CHANNELS.len();
        if let Some(&b) = self.grid.blocks.iter().find(|&&b| b >= blocks) {
            return fail("blocks", &format!("block {b} does not exist (the network has {blocks})"));
        }
        for v in &self.variants {
            parse_variant(v)?;
        }
        Ok(())
    }

    pub fn suite(&self) -> SuiteConfig {
        SuiteConfig {
            comp_epochs: self.comp_epochs,
            stn_epochs: self.stn_epochs,
            seed: self.seed,
            jobs: self.jobs,
            mean_variant: self.mean_variant,
            stn_start: self.stn_start,
            cell_dir: Some(self.out_dir.join(CELL_DIR)),
            checkpoint_dir: Some(self.out_dir.join(CHILD_DIR)),
        }
    }

    pub fn load_splits(&self) -> Result<Splits> {
        match self.dataset {
            DatasetKind::Mnist => Splits::mnist(&self.data_dir, self.hflip, self.train_limit),
            DatasetKind::Synth => {
                let train = self.train_limit.map_or(self.synth_train, |n| n.min(self.synth_train));
                Splits::synthetic(train, self.synth_eval, self.seed, self.hflip)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub triage: String,
    pub format_version: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub seed: u64,
    pub versions: Versions,
}

pub fn manifest_path(out_dir: &Path, command: &str) -> PathBuf {
    out_dir.join(format!("manifest-{command}.json"))
}

pub fn write_manifest(config: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(&config.out_dir)?;
    let path = manifest_path(&config.out_dir, &config.command);
    let manifest = Manifest {
        config: config.clone(),
        seed: config.seed,
        versions: Versions {
            triage: env!("CARGO_PKG_VERSION").to_string(),
            format_version: persistence::FORMAT_VERSION,
        },
    };
    fs::write(&path, report::canonical_json(&manifest)?)?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => e.into(),
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// A model named on the `viz` command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    Child(TrainScheme, InitScheme),
}

pub fn parse_variant(name: &str) -> Result<Variant> {
    if name == "baseline" {
        return Ok(Variant::Baseline);
    }
    let bad = || Error::Config {
        field: "variants",
        message: format!("`{name}` is neither `baseline` nor `<fm|tm>-<rw|mw|stn>`"),
    };
    let (train, init) = name.split_once('-').ok_or_else(bad)?;
    Ok(Variant::Child(
        TrainScheme::from_str(train, true).map_err(|_| bad())?,
        InitScheme::from_str(init, true).map_err(|_| bad())?,
    ))
}

/// Exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::MissingArtifact(_) => EXIT_MISSING_ARTIFACT,
        Error::DataNotFound { .. }
        | Error::Format { .. }
        | Error::Truncated { .. }
        | Error::Consistency(_)
        | Error::Corruption { .. }
        | Error::Version(_)
        | Error::Schema(_) => EXIT_DATA,
        _ => EXIT_VALIDATION,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineFile {
    pub baseline: Baseline,
    pub fit: FitReport,
}

fn load_parent(config: &RunConfig, splits: &Splits) -> Result<Network> {
    let parent = persistence::load(&config.out_dir.join(BASELINE_CHECKPOINT))?;
    let expected = ModelSpec::mini_vgg(splits.image_shape(), splits.class_count());
    if parent.spec() != &expected {
        return Err(Error::InvalidPlan(format!(
            "baseline checkpoint was trained for input {:?} with {} classes, dataset provides {:?} with {}",
            parent.spec().input_shape,
            parent.spec().num_classes,
            expected.input_shape,
            expected.num_classes
        )));
    }
    Ok(parent)
}

pub fn cmd_train_base(config: &RunConfig) -> Result<BaselineFile> {
    write_manifest(config)?;
    let splits = config.load_splits()?;
    let spec = ModelSpec::mini_vgg(splits.image_shape(), splits.class_count());
    let (net, fit) = train_base(&spec, &splits, &config.hyper, config.epochs, config.seed)?;
    persistence::save(&net, &config.out_dir.join(BASELINE_CHECKPOINT))?;
    let file = BaselineFile {
        baseline: Baseline::from_fit(&net, &fit),
        fit,
    };
    fs::write(config.out_dir.join(BASELINE_METRICS), report::canonical_json(&file)?)?;
    info!(
        "baseline: max validation accuracy {:.4}, final test accuracy {:.4}",
        file.baseline.accuracy_series.max(),
        file.baseline.test_accuracy_series.values().last().copied().unwrap_or(0.0)
    );
    Ok(file)
}

pub fn cmd_triage(config: &RunConfig) -> Result<Vec<ExperimentResult>> {
    if !config.out_dir.join(BASELINE_CHECKPOINT).exists() {
        return Err(Error::MissingArtifact(config.out_dir.join(BASELINE_CHECKPOINT)));
    }
    write_manifest(config)?;
    let splits = config.load_splits()?;
    let parent = load_parent(config, &splits)?;
    let results = run_triage_suite(&parent, &config.grid, &config.suite(), &splits, &config.hyper)?;
    if config.out_dir.join(BASELINE_METRICS).exists() {
        cmd_report(config)?;
    } else {
        warn!("no baseline metrics found; skipping the results table");
    }
    Ok(results)
}

fn read_baseline(out_dir: &Path) -> Result<BaselineFile> {
    let path = out_dir.join(BASELINE_METRICS);
    let text = fs::read_to_string(&path).map_err(|_| Error::MissingArtifact(path.clone()))?;
    Ok(serde_json::from_str(&text)?)
}

fn read_cell(out_dir: &Path, key: CellKey) -> Result<Option<ExperimentResult>> {
    let path = cell_path(&out_dir.join(CELL_DIR), key);
    match fs::read_to_string(&path) {
        Ok(text) => Ok(Some(serde_json::from_str(&text)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

pub fn cmd_report(config: &RunConfig) -> Result<report::ResultsDocument> {
    let baseline = read_baseline(&config.out_dir)?;
    let mut table = ResultsTable::new(baseline.baseline);
    for key in config.grid.cells() {
        if let Some(r) = read_cell(&config.out_dir, key)? {
            table.insert(r)?;
        }
    }
    let doc = report::emit_results(&table, &config.grid, &config.out_dir, config.threshold)?;
    info!(
        "wrote {} cells to {}",
        doc.cells.len(),
        config.out_dir.join(report::RESULTS_CSV).display()
    );
    Ok(doc)
}

/// Writes `viz/block<b>/<variant>/filter_XX.pgm` for every requested block
/// and variant. Returns the written files.
pub fn cmd_viz(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let variants: Vec<(String, Variant)> = config
        .variants
        .iter()
        .map(|v| parse_variant(v).map(|p| (v.clone(), p)))
        .collect::<Result<_>>()?;
    let mut nets = Vec::new();
    for &block in &config.grid.blocks {
        for (name, variant) in &variants {
            let path = match variant {
                Variant::Baseline => config.out_dir.join(BASELINE_CHECKPOINT),
                Variant::Child(train, init) => child_checkpoint_path(
                    &config.out_dir.join(CHILD_DIR),
                    CellKey {
                        block,
                        init: *init,
                        train: *train,
                    },
                ),
            };
            if !path.exists() {
                return Err(Error::MissingArtifact(path));
            }
            nets.push((block, name.clone(), path));
        }
    }
    write_manifest(config)?;
    let splits = config.load_splits()?;
    if config.image_index >= splits.test.len() {
        return Err(Error::OutOfRange {
            what: "image",
            index: config.image_index,
            limit: splits.test.len(),
        });
    }
    let image = splits.test.image(config.image_index)?;
    let mut written = Vec::new();
    for (block, name, path) in nets {
        let net = persistence::load(&path)?;
        let dir = config.out_dir.join(VIZ_DIR).join(format!("block{block}")).join(&name);
        let (_, files) = report::dump_activations(&net, &image, block, config.filters, &dir)?;
        written.extend(files);
    }
    Ok(written)
}

pub fn execute(command: &Command) -> Result<()> {
    let config = RunConfig::resolve(command.name(), command.args())?;
    match command {
        Command::TrainBase(_) => cmd_train_base(&config).map(|_| ()),
        Command::Triage(_) => cmd_triage(&config).map(|_| ()),
        Command::Viz(_) => cmd_viz(&config).map(|_| ()),
        Command::Report(_) => cmd_report(&config).map(|_| ()),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
