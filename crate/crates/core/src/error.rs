use thiserror::Error;

#[derive(Debug, Error)]
pub enum EarError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EarError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(EarError::InvalidArgument(msg.into()))
}
