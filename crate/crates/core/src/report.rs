//! Result tables (CSV and JSON) and activation-map dumps (binary PGM).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{AccuracySeries, Threshold, CONVERGENCE_FRACTION};
use crate::model::{Network, TapPoint, VIZ_TAP};
use crate::tensor::Tensor;
use crate::train::FitReport;
use crate::triage::{CellKey, ExperimentResult, Grid, InitScheme, TrainScheme};

pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_JSON: &str = "results.json";
pub const DEFAULT_FILTERS: usize = 10;

/// Metrics of the uncompressed network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub accuracy_series: AccuracySeries,
    pub test_accuracy_series: AccuracySeries,
    pub param_count: usize,
    pub wall_time: f64,
}

impl Baseline {
    pub fn from_fit(net: &Network, fit: &FitReport) -> Self {
        Baseline {
            accuracy_series: fit.val_accuracy.clone(),
            test_accuracy_series: fit.test_accuracy.clone(),
            param_count: net.param_count(),
            wall_time: fit.wall_time,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ResultsTable {
    pub baseline: Option<Baseline>,
    rows: BTreeMap<CellKey, ExperimentResult>,
}

impl ResultsTable {
    pub fn new(baseline: Baseline) -> Self {
        ResultsTable {
            baseline: Some(baseline),
            rows: BTreeMap::new(),
        }
    }

    /// Adds a row; a second row for the same cell is rejected.
    pub fn insert(&mut self, result: ExperimentResult) -> Result<()> {
        let key = result.key();
        if self.rows.contains_key(&key) {
            return Err(Error::InvalidPlan(format!("duplicate result for {key}")));
        }
        self.rows.insert(key, result);
        Ok(())
    }

    pub fn rows(&self) -> impl Iterator<Item = &ExperimentResult> {
        self.rows.values()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Cells of `grid` without a row, plus the baseline if it is absent.
    pub fn missing(&self, grid: &Grid) -> Vec<String> {
        let mut out: Vec<String> = grid
            .cells()
            .into_iter()
            .filter(|k| !self.rows.contains_key(k))
            .map(|k| k.file_stem())
            .collect();
        if self.baseline.is_none() {
            out.insert(0, "baseline".into());
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CsvRow {
    block: String,
    init: String,
    train: String,
    max_accuracy: f64,
    convergence_epoch: usize,
    param_count: usize,
    wall_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub block: usize,
    pub init: InitScheme,
    pub train: TrainScheme,
    pub max_accuracy: f64,
    /// `max_accuracy` minus the baseline's maximum accuracy.
    pub relative_max_accuracy: f64,
    pub convergence_epoch: usize,
    pub param_count: usize,
    pub wall_time: f64,
    pub accuracy_series: AccuracySeries,
    pub test_accuracy_series: AccuracySeries,
    pub stn_loss: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRecord {
    pub max_accuracy: f64,
    pub convergence_epoch: usize,
    pub param_count: usize,
    pub wall_time: f64,
    pub accuracy_series: AccuracySeries,
    pub test_accuracy_series: AccuracySeries,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// Mean convergence epoch per training scheme, over every init and block.
    pub convergence_by_train: BTreeMap<TrainScheme, f64>,
    /// Mean convergence epoch per `(train, init)` pair, keyed `"tm-stn"` etc.
    pub convergence_by_model: BTreeMap<String, f64>,
    /// Mean maximum accuracy per training scheme and block, keyed `"fm/0"` etc.
    pub max_accuracy_by_train_block: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsDocument {
    pub convergence_fraction: f64,
    pub threshold: Threshold,
    pub baseline: BaselineRecord,
    pub cells: Vec<CellRecord>,
    pub aggregate: Aggregate,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn grouped<K: Ord>(cells: &[CellRecord], key: impl Fn(&CellRecord) -> K, value: impl Fn(&CellRecord) -> f64) -> BTreeMap<K, f64> {
    let mut groups: BTreeMap<K, Vec<f64>> = BTreeMap::new();
    for c in cells {
        groups.entry(key(c)).or_default().push(value(c));
    }
    groups.into_iter().map(|(k, v)| (k, mean(&v))).collect()
}

/// Builds the JSON document for `grid`, failing with the list of missing
/// cells when the table does not cover it.
pub fn results_document(table: &ResultsTable, grid: &Grid, threshold: Threshold) -> Result<ResultsDocument> {
    let missing = table.missing(grid);
    if !missing.is_empty() || table.is_empty() {
        let mut missing = missing;
        if missing.is_empty() {
            missing.push("every cell".into());
        }
        return Err(Error::IncompleteResults(missing));
    }
    let base = table.baseline.as_ref().expect("baseline checked above");
    let frac = CONVERGENCE_FRACTION;
    let base_max = base.accuracy_series.max();
    let cells: Vec<CellRecord> = grid
        .cells()
        .into_iter()
        .map(|k| {
            let r = &table.rows[&k];
            CellRecord {
                block: k.block,
                init: k.init,
                train: k.train,
                max_accuracy: r.max_accuracy,
                relative_max_accuracy: r.max_accuracy - base_max,
                convergence_epoch: r.accuracy_series.convergence_epoch_with(frac, threshold),
                param_count: r.param_count_child,
                wall_time: r.wall_time,
                accuracy_series: r.accuracy_series.clone(),
                test_accuracy_series: r.test_accuracy_series.clone(),
                stn_loss: r.stn_loss.clone(),
            }
        })
        .collect();
    let aggregate = Aggregate {
        convergence_by_train: grouped(&cells, |c| c.train, |c| c.convergence_epoch as f64),
        convergence_by_model: grouped(&cells, |c| format!("{}-{}", c.train, c.init), |c| c.convergence_epoch as f64),
        max_accuracy_by_train_block: grouped(&cells, |c| format!("{}/{}", c.train, c.block), |c| c.max_accuracy),
    };
    Ok(ResultsDocument {
        convergence_fraction: frac,
        threshold,
        baseline: BaselineRecord {
            max_accuracy: base_max,
            convergence_epoch: base.accuracy_series.convergence_epoch_with(frac, threshold),
            param_count: base.param_count,
            wall_time: base.wall_time,
            accuracy_series: base.accuracy_series.clone(),
            test_accuracy_series: base.test_accuracy_series.clone(),
        },
        cells,
        aggregate,
    })
}

/// Writes `results.csv` (one baseline row, then one row per cell) and
/// `results.json` into `dir`.
pub fn emit_results(table: &ResultsTable, grid: &Grid, dir: &Path, threshold: Threshold) -> Result<ResultsDocument> {
    let doc = results_document(table, grid, threshold)?;
    fs::create_dir_all(dir)?;
    let mut csv = csv::Writer::from_path(dir.join(RESULTS_CSV))?;
    csv.serialize(CsvRow {
        block: "baseline".into(),
        init: String::new(),
        train: String::new(),
        max_accuracy: doc.baseline.max_accuracy,
        convergence_epoch: doc.baseline.convergence_epoch,
        param_count: doc.baseline.param_count,
        wall_time: doc.baseline.wall_time,
    })?;
    for c in &doc.cells {
        csv.serialize(CsvRow {
            block: c.block.to_string(),
            init: c.init.to_string(),
            train: c.train.to_string(),
            max_accuracy: c.max_accuracy,
            convergence_epoch: c.convergence_epoch,
            param_count: c.param_count,
            wall_time: c.wall_time,
        })?;
    }
    csv.flush()?;
    fs::write(dir.join(RESULTS_JSON), canonical_json(&doc)?)?;
    Ok(doc)
}

/// Pretty JSON with a trailing newline.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

// ---- activation maps ------------------------------------------------------

/// Channels of one activation tensor rendered as 8-bit images.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationGrid {
    pub tap: TapPoint,
    pub width: usize,
    pub height: usize,
    pub filters: Vec<usize>,
    /// One row-major `height * width` image per entry of `filters`.
    pub images: Vec<Vec<u8>>,
    pub warning: Option<String>,
}

/// Per-channel min-max scaling to `0..=255`; a constant channel becomes all zeros.
pub fn normalize_channel(values: &[f32]) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return vec![0; values.len()];
    }
    let range = (hi - lo) as f64;
    values
        .iter()
        .map(|&v| ((v - lo) as f64 / range * 255.0).round() as u8)
        .collect()
}

/// Eval-mode activations after the last ReLU of `block` for a single
/// image, first `k` channels.
pub fn activation_grid(net: &Network, image: &Tensor, block: usize, k: usize) -> Result<ActivationGrid> {
    let x = match image.rank() {
        3 => image.clone().reshape(&[1, image.shape()[0], image.shape()[1], image.shape()[2]])?,
        _ => image.clone(),
    };
    if x.shape()[0] != 1 {
        return Err(Error::shape(&[1, x.shape()[1], x.shape()[2], x.shape()[3]], x.shape()));
    }
    let tap = TapPoint {
        block,
        site: VIZ_TAP,
    };
    let act = net.infer_to_tap(&x, tap)?;
    let [_, h, w, c] = *act.shape() else { unreachable!() };
    let mut warning = None;
    let count = if k > c {
        let msg = format!("requested {k} filters but block {block} has {c} channels; writing {c}");
        warn!("{msg}");
        warning = Some(msg);
        c
    } else {
        k
    };
    let data = act.data();
    let images = (0..count)
        .map(|ch| {
            let plane: Vec<f32> = (0..h * w).map(|p| data[p * c + ch]).collect();
            normalize_channel(&plane)
        })
        .collect();
    Ok(ActivationGrid {
        tap,
        width: w,
        height: h,
        filters: (0..count).collect(),
        images,
        warning,
    })
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a binary PGM with maxval 255.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::Format {
        path: PathBuf::from("<pgm>"),
        message: m.to_string(),
    };
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("maxval must be 255"));
    }
    let pixels = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
    if pixels.len() != w * h {
        return Err(bad("raster size does not match header"));
    }
    Ok((w, h, pixels.to_vec()))
}

/// Writes `filter_00.pgm`, `filter_01.pgm`, ... into `dir`.
pub fn dump_activations(net: &Network, image: &Tensor, block: usize, k: usize, dir: &Path) -> Result<(ActivationGrid, Vec<PathBuf>)> {
    let grid = activation_grid(net, image, block, k)?;
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(grid.images.len());
    for (f, img) in grid.filters.iter().zip(&grid.images) {
        let path = dir.join(format!("filter_{f:02}.pgm"));
        fs::write(&path, encode_pgm(grid.width, grid.height, img))?;
        paths.push(path);
    }
    Ok((grid, paths))
}
