use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {dim} expected {expected}, got {got}")]
    ShapeMismatch { op: &'static str, dim: &'static str, expected: usize, got: usize },

    #[error("invalid shape {shape:?} for {op}: {reason}")]
    InvalidShape { op: &'static str, shape: Vec<usize>, reason: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward called on an empty tape")]
    EmptyTape,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unsupported bitwidth {0} (expected 4, 6 or 8)")]
    Bitwidth(u32),

    #[error("accumulator {0} overflows the 32-bit range")]
    AccumulatorOverflow(i64),

    #[error("missing quantization parameters for {0}")]
    MissingQuantParams(String),

    #[error("invalid model configuration: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("timestamps must be nondecreasing: {previous} then {current}")]
    NonMonotoneTime { previous: f64, current: f64 },

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::invalid(msg)
}
