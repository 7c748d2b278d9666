//! Structural compression of one block, the three initialization schemes
//! for the compressed layer, the two retraining regimes and the grid runner.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset, Splits};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Conv2d};
use crate::metrics::{AccuracySeries, CONVERGENCE_FRACTION};
use crate::model::{Block, ConvUnit, ModelSpec, Network, Scope, TapPoint};
use crate::optim::{Hyperparams, SgdMomentum};
use crate::tensor::Tensor;
use crate::train::{fit, mix_seed, FitReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    /// Glorot-uniform weights.
    RW,
    /// Mean of the parent block's 3x3 kernel slices.
    MW,
    /// Student-teacher regression onto the parent's post-pool activations.
    STN,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TrainScheme {
    /// Only the compressed layer trains.
    FM,
    /// The whole network trains.
    TM,
}

impl InitScheme {
    pub const ALL: [InitScheme; 3] = [InitScheme::RW, InitScheme::MW, InitScheme::STN];

    pub fn as_str(self) -> &'static str {
        match self {
            InitScheme::RW => "rw",
            InitScheme::MW => "mw",
            InitScheme::STN => "stn",
        }
    }
}

impl TrainScheme {
    pub const ALL: [TrainScheme; 2] = [TrainScheme::FM, TrainScheme::TM];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainScheme::FM => "fm",
            TrainScheme::TM => "tm",
        }
    }

    pub fn scope(self, block: usize) -> Scope {
        match self {
            TrainScheme::FM => Scope::Block(block),
            TrainScheme::TM => Scope::All,
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for TrainScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How the mean-parent kernel is averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MeanVariant {
    /// One 3x3 slice averaged over every slice of every conv in the block.
    #[default]
    GlobalSlice,
    /// One slice per output channel, averaged over the input channels of
    /// the block's first conv.
    PerOutputChannel,
}

/// State of the compressed layer before student-teacher training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum StnStart {
    #[default]
    Glorot,
    MeanParent,
}

pub const DEFAULT_COMP_EPOCHS: usize = 25;
pub const DEFAULT_STN_EPOCHS: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriageConfig {
    pub block_index: usize,
    pub init: InitScheme,
    pub train: TrainScheme,
    pub comp_epochs: usize,
    pub stn_epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub mean_variant: MeanVariant,
    #[serde(default)]
    pub stn_start: StnStart,
}

impl TriageConfig {
    pub fn new(block_index: usize, init: InitScheme, train: TrainScheme, seed: u64) -> Self {
        TriageConfig {
            block_index,
            init,
            train,
            comp_epochs: DEFAULT_COMP_EPOCHS,
            stn_epochs: DEFAULT_STN_EPOCHS,
            seed,
            mean_variant: MeanVariant::default(),
            stn_start: StnStart::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.comp_epochs == 0 {
            return Err(Error::Config {
                field: "comp_epochs",
                message: "must be at least 1".into(),
            });
        }
        if self.init == InitScheme::STN && self.stn_epochs == 0 {
            return Err(Error::Config {
                field: "stn_epochs",
                message: "must be at least 1 for student-teacher initialization".into(),
            });
        }
        Ok(())
    }

    pub fn key(&self) -> CellKey {
        CellKey {
            block: self.block_index,
            init: self.init,
            train: self.train,
        }
    }
}

/// Grid coordinates of one experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub block: usize,
    pub init: InitScheme,
    pub train: TrainScheme,
}

impl CellKey {
    /// Seed of this cell under `master`; independent of grid order and job count.
    pub fn seed(&self, master: u64) -> u64 {
        let s = mix_seed(master, 0xB10C + self.block as u64);
        let s = mix_seed(s, 0x1A17 + self.init as u64);
        mix_seed(s, 0x7EA1 + self.train as u64)
    }

    pub fn file_stem(&self) -> String {
        format!("cell_b{}_{}_{}", self.block, self.init, self.train)
    }
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "block {} {}-{}", self.block, self.train, self.init)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: TriageConfig,
    /// Validation accuracy after each retraining epoch.
    pub accuracy_series: AccuracySeries,
    pub test_accuracy_series: AccuracySeries,
    pub max_accuracy: f64,
    pub convergence_epoch: usize,
    pub param_count_child: usize,
    pub wall_time: f64,
    /// Initial loss followed by one mean loss per epoch, for STN cells.
    #[serde(default)]
    pub stn_loss: Option<Vec<f64>>,
}

impl ExperimentResult {
    pub fn from_fit(
        config: TriageConfig,
        child: &Network,
        fit: FitReport,
        stn_loss: Option<Vec<f64>>,
        wall_time: f64,
    ) -> Self {
        ExperimentResult {
            max_accuracy: fit.val_accuracy.max(),
            convergence_epoch: fit.val_accuracy.convergence_epoch(CONVERGENCE_FRACTION),
            accuracy_series: fit.val_accuracy,
            test_accuracy_series: fit.test_accuracy,
            param_count_child: child.param_count(),
            config,
            wall_time,
            stn_loss,
        }
    }

    pub fn key(&self) -> CellKey {
        self.config.key()
    }
}

// ---- compression and initialization ---------------------------------------

/// Replaces block `block` of `parent` with a single zeroed Conv + BN unit
/// of shape `3x3 x C_prev x C_block`. Every other layer is copied. The
/// child is flagged as awaiting initialization.
pub fn structural_compress(parent: &Network, block: usize) -> Result<Network> {
    let blocks = parent.blocks.len();
    if block >= blocks {
        return Err(Error::InvalidTap { block, blocks });
    }
    if parent.blocks[block].units.len() < 2 {
        return Err(Error::NothingToCompress(block));
    }
    let mut spec: ModelSpec = parent.spec().clone();
    spec.blocks[block].conv_count = 1;
    let cin = spec.block_input_channels(block);
    let cout = spec.blocks[block].channels;
    let mut layers: Vec<Block> = parent.blocks.clone();
    layers[block] = Block {
        units: vec![ConvUnit {
            conv: Conv2d::new(cin, cout)?,
            bn: BatchNorm2d::new(cout)?,
        }],
    };
    let mut child = parent.clone();
    child.set_spec_and_blocks(spec, layers);
    child.mark_compressed(block, true);
    Ok(child)
}

fn compressed_unit(child: &mut Network, block: usize) -> Result<&mut ConvUnit> {
    match child.compressed_block() {
        Some(b) if b == block => Ok(&mut child.blocks[block].units[0]),
        Some(b) => Err(Error::InvalidPlan(format!(
            "block {block} requested but block {b} is the compressed one"
        ))),
        None => Err(Error::InvalidPlan("network has no compressed layer".into())),
    }
}

/// Glorot-uniform compressed conv, zero bias, identity batch norm.
pub fn init_random(child: &mut Network, block: usize, seed: u64) -> Result<()> {
    let unit = compressed_unit(child, block)?;
    unit.conv.reinit_glorot(&mut ChaCha8Rng::seed_from_u64(seed));
    unit.bn.reset();
    child.mark_initialized();
    Ok(())
}

/// Mean-parent initialization. With [`MeanVariant::GlobalSlice`] every
/// 3x3 slice of the compressed kernel is the unweighted mean of all slices
/// of all convs in the parent block and every bias is the mean of all
/// parent-block biases.
pub fn init_mean_parent(child: &mut Network, parent: &Network, block: usize, variant: MeanVariant) -> Result<()> {
    let source = parent
        .blocks
        .get(block)
        .ok_or(Error::InvalidTap {
            block,
            blocks: parent.blocks.len(),
        })?;
    if parent.compressed_block() == Some(block) {
        return Err(Error::InvalidPlan(format!("parent block {block} is itself compressed")));
    }
    let unit = compressed_unit(child, block)?;
    let (cin, cout) = (unit.conv.in_channels(), unit.conv.out_channels());
    let first = &source.units[0].conv;
    if first.in_channels() != cin || first.out_channels() != cout {
        return Err(Error::InvalidPlan(format!(
            "parent block {block} maps {} -> {} channels, compressed layer maps {cin} -> {cout}",
            first.in_channels(),
            first.out_channels()
        )));
    }
    let w = unit.conv.weight.data_mut();
    let b = unit.conv.bias.data_mut();
    match variant {
        MeanVariant::GlobalSlice => {
            let mut slice = [0.0f64; 9];
            let mut slices = 0usize;
            let mut bias = 0.0f64;
            let mut biases = 0usize;
            for u in &source.units {
                let [_, _, ci, co] = *u.conv.weight.shape() else { unreachable!() };
                for (tap, chunk) in u.conv.weight.data().chunks_exact(ci * co).enumerate() {
                    slice[tap] += chunk.iter().map(|&v| v as f64).sum::<f64>();
                }
                slices += ci * co;
                bias += u.conv.bias.data().iter().map(|&v| v as f64).sum::<f64>();
                biases += co;
            }
            for (tap, chunk) in w.chunks_exact_mut(cin * cout).enumerate() {
                chunk.fill((slice[tap] / slices as f64) as f32);
            }
            b.fill((bias / biases as f64) as f32);
        }
        MeanVariant::PerOutputChannel => {
            let fw = first.weight.data();
            for tap in 0..9 {
                for o in 0..cout {
                    let mean = (0..cin)
                        .map(|i| fw[(tap * cin + i) * cout + o] as f64)
                        .sum::<f64>()
                        / cin as f64;
                    for i in 0..cin {
                        w[(tap * cin + i) * cout + o] = mean as f32;
                    }
                }
            }
            b.copy_from_slice(first.bias.data());
        }
    }
    unit.bn.reset();
    child.mark_initialized();
    Ok(())
}

/// `(1/N) * sum_i ||s_i - t_i||^2` and its gradient `2 (s - t) / N` with
/// respect to `s`, where `N` is the leading dimension.
pub fn stn_loss(student: &Tensor, teacher: &Tensor) -> Result<(f64, Tensor)> {
    if student.shape() != teacher.shape() {
        return Err(Error::InvalidPlan(format!(
            "student tap {:?} does not match teacher tap {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    let n = student.shape()[0];
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut loss = 0.0f64;
    let scale = 2.0 / n as f64;
    let grad: Vec<f32> = student
        .data()
        .iter()
        .zip(teacher.data())
        .map(|(&s, &t)| {
            let d = s as f64 - t as f64;
            loss += d * d;
            (scale * d) as f32
        })
        .collect();
    Ok((loss / n as f64, Tensor::from_vec(student.shape(), grad)?))
}

/// One student-teacher step on batch `x`: training-mode student tap,
/// eval-mode teacher tap, and an update of the compressed block only.
/// Returns the loss before the update.
pub fn stn_step(
    child: &mut Network,
    parent: &Network,
    block: usize,
    x: &Tensor,
    opt: &mut SgdMomentum,
) -> Result<f64> {
    let scope = Scope::Block(block);
    let teacher = parent.infer_to_tap(x, TapPoint::post_pool(block))?;
    let student = child.forward_train_to_tap(x, block, scope)?;
    let (loss, grad) = stn_loss(&student, &teacher)?;
    let grads = child.backward_from_tap(&grad)?;
    opt.step(child.parameters_mut(scope), &grads)?;
    Ok(loss)
}

/// Student-teacher initialization. The compressed layer must already hold
/// its starting state. Labels in `data` are ignored. Returns the initial
/// loss (training-mode, measured on a discarded copy) followed by the mean
/// batch loss of each epoch.
pub fn init_stn(
    child: &mut Network,
    parent: &Network,
    block: usize,
    stn_epochs: usize,
    data: &Dataset,
    hyper: &Hyperparams,
    seed: u64,
) -> Result<Vec<f64>> {
    compressed_unit(child, block)?;
    if child.awaiting_init() {
        return Err(Error::UninitializedLayer(block));
    }
    let mut trace = Vec::with_capacity(stn_epochs + 1);
    let mut probe = child.clone();
    let mut initial = 0.0;
    for batch in batches(data, hyper.batch_size, None)? {
        let batch = batch?;
        let teacher = parent.infer_to_tap(&batch.images, TapPoint::post_pool(block))?;
        let student = probe.forward_train_to_tap(&batch.images, block, Scope::Block(block))?;
        initial += stn_loss(&student, &teacher)?.0 * batch.labels.len() as f64;
    }
    trace.push(initial / data.len() as f64);
    let mut opt = hyper.optimizer();
    for epoch in 0..stn_epochs {
        let mut total = 0.0;
        for batch in batches(data, hyper.batch_size, Some(mix_seed(seed, epoch as u64)))? {
            let batch = batch?;
            total += stn_step(child, parent, block, &batch.images, &mut opt)? * batch.labels.len() as f64;
        }
        let mean = total / data.len() as f64;
        info!("stn epoch {epoch}: loss {mean:.5}");
        trace.push(mean);
    }
    Ok(trace)
}

// ---- retraining -----------------------------------------------------------

/// Retrains a compressed, initialized child. FM updates only the compressed
/// block; TM updates every parameter.
pub fn train_compressed(
    child: &mut Network,
    scheme: TrainScheme,
    comp_epochs: usize,
    splits: &Splits,
    hyper: &Hyperparams,
    seed: u64,
) -> Result<FitReport> {
    let block = child
        .compressed_block()
        .ok_or_else(|| Error::InvalidPlan("network has no compressed layer".into()))?;
    if child.awaiting_init() {
        return Err(Error::UninitializedLayer(block));
    }
    if comp_epochs == 0 {
        return Err(Error::Config {
            field: "comp_epochs",
            message: "must be at least 1".into(),
        });
    }
    fit(child, scheme.scope(block), splits, hyper, comp_epochs, seed)
}

/// Trains a freshly built network from scratch.
pub fn train_base(spec: &ModelSpec, splits: &Splits, hyper: &Hyperparams, epochs: usize, seed: u64) -> Result<(Network, FitReport)> {
    if epochs == 0 {
        return Err(Error::Config {
            field: "epochs",
            message: "must be at least 1".into(),
        });
    }
    let mut net = Network::build(spec, mix_seed(seed, 0x1417))?;
    let report = fit(&mut net, Scope::All, splits, hyper, epochs, seed)?;
    Ok((net, report))
}

/// Compresses, initializes and retrains one grid cell starting from `parent`.
pub fn run_cell(parent: &Network, config: &TriageConfig, splits: &Splits, hyper: &Hyperparams) -> Result<(Network, ExperimentResult)> {
    config.validate()?;
    hyper.validate()?;
    let start = Instant::now();
    let block = config.block_index;
    let mut child = structural_compress(parent, block)?;
    let init_seed = mix_seed(config.seed, 1);
    let mut stn = None;
    match config.init {
        InitScheme::RW => init_random(&mut child, block, init_seed)?,
        InitScheme::MW => init_mean_parent(&mut child, parent, block, config.mean_variant)?,
        InitScheme::STN => {
            match config.stn_start {
                StnStart::Glorot => init_random(&mut child, block, init_seed)?,
                StnStart::MeanParent => init_mean_parent(&mut child, parent, block, config.mean_variant)?,
            }
            stn = Some(init_stn(
                &mut child,
                parent,
                block,
                config.stn_epochs,
                &splits.train,
                hyper,
                mix_seed(config.seed, 2),
            )?);
        }
    }
    let report = train_compressed(&mut child, config.train, config.comp_epochs, splits, hyper, mix_seed(config.seed, 3))?;
    let result = ExperimentResult::from_fit(config.clone(), &child, report, stn, start.elapsed().as_secs_f64());
    Ok((child, result))
}

// ---- grid -----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub blocks: Vec<usize>,
    pub inits: Vec<InitScheme>,
    pub trains: Vec<TrainScheme>,
}

impl Grid {
    /// Every block crossed with every initialization and training scheme.
    pub fn full(block_count: usize) -> Self {
        Grid {
            blocks: (0..block_count).collect(),
            inits: InitScheme::ALL.to_vec(),
            trains: TrainScheme::ALL.to_vec(),
        }
    }

    /// Cells in block, init, train order.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for &block in &self.blocks {
            for &init in &self.inits {
                for &train in &self.trains {
                    out.push(CellKey { block, init, train });
                }
            }
        }
        out.sort();
        out.dedup();
        out
    }

    pub fn len(&self) -> usize {
        self.cells().len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells().is_empty()
    }
}

/// Settings shared by every cell of a suite run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub comp_epochs: usize,
    pub stn_epochs: usize,
    pub seed: u64,
    pub jobs: usize,
    #[serde(default)]
    pub mean_variant: MeanVariant,
    #[serde(default)]
    pub stn_start: StnStart,
    /// Directory holding one result file per finished cell.
    #[serde(default)]
    pub cell_dir: Option<PathBuf>,
    /// Directory receiving one checkpoint per retrained child.
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            comp_epochs: DEFAULT_COMP_EPOCHS,
            stn_epochs: DEFAULT_STN_EPOCHS,
            seed: 0,
            jobs: 1,
            mean_variant: MeanVariant::default(),
            stn_start: StnStart::default(),
            cell_dir: None,
            checkpoint_dir: None,
        }
    }
}

impl SuiteConfig {
    pub fn cell_config(&self, key: CellKey) -> TriageConfig {
        TriageConfig {
            block_index: key.block,
            init: key.init,
            train: key.train,
            comp_epochs: self.comp_epochs,
            stn_epochs: self.stn_epochs,
            seed: key.seed(self.seed),
            mean_variant: self.mean_variant,
            stn_start: self.stn_start,
        }
    }
}

pub fn cell_path(dir: &Path, key: CellKey) -> PathBuf {
    dir.join(format!("{}.json", key.file_stem()))
}

pub fn child_checkpoint_path(dir: &Path, key: CellKey) -> PathBuf {
    dir.join(format!("{}.ckpt", key.file_stem()))
}

fn load_finished(dir: &Path, config: &TriageConfig) -> Option<ExperimentResult> {
    let path = cell_path(dir, config.key());
    let text = fs::read_to_string(&path).ok()?;
    match serde_json::from_str::<ExperimentResult>(&text) {
        Ok(r) if &r.config == config => Some(r),
        Ok(_) => {
            warn!("{} was produced by a different configuration; rerunning", path.display());
            None
        }
        Err(e) => {
            warn!("ignoring unreadable {}: {e}", path.display());
            None
        }
    }
}

fn store_finished(dir: &Path, result: &ExperimentResult) -> Result<()> {
    let path = cell_path(dir, result.key());
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(result)?)?;
    fs::rename(&tmp, &path)?;
    Ok(())
}

/// Runs every grid cell from a fresh compression of `parent`, in parallel
/// across `config.jobs` workers. Cells already stored in `config.cell_dir`
/// with a matching configuration are reused. Results come back in grid order.
pub fn run_triage_suite(
    parent: &Network,
    grid: &Grid,
    config: &SuiteConfig,
    splits: &Splits,
    hyper: &Hyperparams,
) -> Result<Vec<ExperimentResult>> {
    hyper.validate()?;
    let cells = grid.cells();
    for key in &cells {
        config.cell_config(*key).validate()?;
        if key.block >= parent.blocks.len() {
            return Err(Error::InvalidTap {
                block: key.block,
                blocks: parent.blocks.len(),
            });
        }
    }
    for dir in [&config.cell_dir, &config.checkpoint_dir].into_iter().flatten() {
        fs::create_dir_all(dir)?;
    }
    let slots: Vec<Mutex<Option<Result<ExperimentResult>>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(key) = cells.get(i) else { break };
        let cell = config.cell_config(*key);
        let outcome = match config.cell_dir.as_deref().and_then(|d| load_finished(d, &cell)) {
            Some(done) => {
                info!("{key}: reusing stored result");
                Ok(done)
            }
            None => {
                info!("{key}: starting");
                run_cell(parent, &cell, splits, hyper).and_then(|(child, result)| {
                    info!("{key}: max accuracy {:.4}", result.max_accuracy);
                    if let Some(dir) = &config.checkpoint_dir {
                        crate::persistence::save(&child, &child_checkpoint_path(dir, *key))?;
                    }
                    if let Some(dir) = &config.cell_dir {
                        store_finished(dir, &result)?;
                    }
                    Ok(result)
                })
            }
        };
        *slots[i].lock().expect("result slot poisoned") = Some(outcome);
    };
    let jobs = config.jobs.clamp(1, cells.len().max(1));
    std::thread::scope(|s| {
        for _ in 1..jobs {
            s.spawn(worker);
        }
        worker();
    });
    slots
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .expect("result slot poisoned")
                .unwrap_or_else(|| Err(Error::InvalidPlan("cell was never run".into())))
        })
        .collect()
}
