use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported primitive `{op}`")]
    UnsupportedPrimitive { op: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value at node `{node}`")]
    NonFinite { node: String },

    #[error("non-finite value in batch row {row}: {what}")]
    NonFiniteRow { row: usize, what: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no valid samples")]
    NoValidSamples,

    #[error("integration failed at tau={tau}: {reason}")]
    Integration { tau: f64, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
