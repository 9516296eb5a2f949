use thiserror::Error;

#[derive(Debug, Error)]
pub enum SharcsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),

    #[error("no training sample carries concept code {0}")]
    NoSuchConcept(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("artifact mismatch: {0}")]
    Mismatch(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SharcsError>;

pub(crate) fn invalid_arg(msg: impl Into<String>) -> SharcsError {
    SharcsError::InvalidArgument(msg.into())
}

pub(crate) fn invalid_state(msg: impl Into<String>) -> SharcsError {
    SharcsError::InvalidState(msg.into())
}
