use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("backward requires a scalar loss, got shape {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("tape has already been consumed by a backward pass")]
    TapeConsumed,

    #[error("tensor {id} appears on the tape with shapes {first:?} and {second:?}")]
    TapeShapeConflict {
        id: u64,
        first: (usize, usize),
        second: (usize, usize),
    },

    #[error("parameter group `{group}` has no gradient for tensor {id}")]
    MissingGradient { group: String, id: u64 },

    #[error("invalid parameter group: {0}")]
    InvalidGroup(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("zero-norm vector cannot be L2-normalized ({0})")]
    ZeroNorm(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("key `{0}` is not unit norm")]
    NotUnitNorm(usize),

    #[error("payload schema mismatch: {0}")]
    Schema(String),

    #[error("non-finite aggregate at round {round}")]
    NonFiniteAggregate { round: usize },

    #[error("infeasible partition: {0}")]
    InfeasiblePartition(String),

    #[error("degenerate probe split: {0}")]
    DegenerateSplit(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("config constraint `{constraint}` violated: {detail}")]
    Constraint { constraint: &'static str, detail: String },

    #[error("unknown ablation setting `{0}`")]
    UnknownSetting(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
