use thiserror::Error;

pub type Result<T, E = CwclError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CwclError {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("row {row} has zero norm")]
    ZeroRow { row: usize },

    #[error("row {row} is not unit-norm (norm = {norm})")]
    NotUnitNorm { row: usize, norm: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss undefined: {0}")]
    Undefined(String),

    #[error("tensor file format error: {0}")]
    Format(String),

    #[error("non-finite loss at step {step} (batch {batch})")]
    Divergence { step: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CwclError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        CwclError::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CwclError::InvalidArgument(msg.into())
    }
}
