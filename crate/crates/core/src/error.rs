use spach_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpachError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    /// Input extents the model cannot process, e.g. a token-MLP model at a new resolution.
    #[error("resolution error: {0}")]
    Resolution(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SpachError> = std::result::Result<T, E>;

pub(crate) fn config_err(msg: impl Into<String>) -> SpachError {
    SpachError::Config(msg.into())
}
