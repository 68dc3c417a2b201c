use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    /// Extents or ranks that do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// Operator hyperparameters that cannot produce a valid result.
    #[error("configuration error: {0}")]
    Config(String),
    /// API misuse, e.g. backward from a non-scalar.
    #[error("contract error: {0}")]
    Contract(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::TensorError::Dimension(format!($($arg)*))
    };
}
pub(crate) use dim_err;
