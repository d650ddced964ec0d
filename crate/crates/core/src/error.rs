use thiserror::Error;

/// Errors produced by the survival toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value produced by `{primitive}`")]
    NonFinite { primitive: &'static str },

    #[error("non-finite gradient; update rejected")]
    NonFiniteGradient,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("time {t} is outside the modeled support [0, {limit}]")]
    OutOfSupport { t: f64, limit: f64 },

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("degenerate ROC curve: {0}")]
    DegenerateCurve(String),

    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("unreachable target: {0}")]
    UnreachableTarget(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
