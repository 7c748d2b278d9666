use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {0:?}: every dimension must be at least 1")]
    InvalidShape(Vec<usize>),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("degenerate batch: train-mode batch norm needs at least 2 values per channel, got {0}")]
    DegenerateBatch(usize),

    #[error("label {label} is out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("tap at block {block} is out of range for a network with {blocks} blocks")]
    InvalidTap { block: usize, blocks: usize },

    #[error("parameter registry mismatch: {0}")]
    RegistryMismatch(String),

    #[error("invalid metric value {0}")]
    InvalidMetric(f64),

    #[error("block {0} holds a single convolution, nothing to compress")]
    NothingToCompress(usize),

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("compressed layer in block {0} has not been initialized")]
    UninitializedLayer(usize),

    #[error("empty batch")]
    EmptyBatch,

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("truncated file {path}: expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("inconsistent dataset: {0}")]
    Consistency(String),

    #[error("preprocessor used before being fitted on a training split")]
    Unfitted,

    #[error("checkpoint payload is corrupt: crc32 {expected:08x} expected, {actual:08x} found")]
    Corruption { expected: u32, actual: u32 },

    #[error("unsupported checkpoint format version {0}")]
    Version(u32),

    #[error("checkpoint schema error: {0}")]
    Schema(String),

    #[error("incomplete results, missing cells: {}", .0.join(", "))]
    IncompleteResults(Vec<String>),

    #[error("invalid configuration for `{field}`: {message}")]
    Config { field: &'static str, message: String },

    #[error("data not found at {path}: {hint}")]
    DataNotFound { path: PathBuf, hint: String },

    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),

    #[error("{what} index {index} is out of range (limit {limit})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
