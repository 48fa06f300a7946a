use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{context}: dimension mismatch (expected {expected}, found {found})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("matrix is not symmetric (max asymmetry {max_asymmetry:.3e})")]
    NotSymmetric { max_asymmetry: f64 },

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:.3e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("finite-difference step underflows at offset {offset:e} (order {order})")]
    StepUnderflow { offset: f64, order: usize },

    #[error("layer index {layer} out of range (network has {layers} layers)")]
    LayerOutOfRange { layer: usize, layers: usize },

    #[error("no closed-form kernel for activation {0}; use the Monte-Carlo limit kernel")]
    NoClosedForm(String),

    #[error("derivatives up to order {needed} required, {supplied} supplied")]
    MissingDerivatives { needed: usize, supplied: usize },

    #[error("expansion depth {0} unsupported (at most 5 correction terms)")]
    UnsupportedDepth(usize),

    #[error("order mismatch: {0}")]
    OrderMismatch(String),

    #[error("training diverged at iteration {iteration} (loss {loss:.3e})")]
    Divergence { iteration: usize, loss: f64 },

    #[error("run record has no parameter snapshots")]
    MissingSnapshots,

    #[error("{excluded} of {total} paths overflowed (more than 1%)")]
    ExcessiveExclusions { excluded: usize, total: usize },

    #[error("dataset file not found: {0}")]
    MissingFile(PathBuf),

    #[error("column {0:?} not found in CSV header")]
    MissingColumn(String),

    #[error("series is empty after parsing ({dropped} rows dropped)")]
    EmptySeries { dropped: usize },

    #[error("series of length {len} too short, need {needed}")]
    InsufficientLength { len: usize, needed: usize },

    #[error("training targets have zero variance")]
    ZeroVariance,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
