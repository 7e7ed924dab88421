use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("loss passed to backward must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("operation not allowed in {mode} codebook mode: {what}")]
    WrongMode { mode: &'static str, what: &'static str },

    #[error("invalid density: {0}")]
    InvalidDensity(String),

    #[error("distribution gap inequality violated: discrete {discrete} > continuous {continuous}")]
    GapViolation { continuous: f64, discrete: f64 },

    #[error("target domain {0} leaked into training or validation data")]
    TargetLeakage(usize),

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss {
        iteration: usize,
        last_good: Option<Box<crate::checkpoint::Checkpoint>>,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("report config hashes differ: {0} vs {1}")]
    HashMismatch(String, String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
