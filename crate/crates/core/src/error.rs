use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration values (duplicate tokens, invalid hyperparameters, ...).
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller violated an operation's precondition (shape, length, batch size).
    #[error("contract violation: {0}")]
    Contract(String),
    /// Token ids or words that do not belong to the vocabulary.
    #[error("decoding error: {0}")]
    Decode(String),
    /// A loss or gradient became NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// A checkpoint was produced under a different configuration.
    #[error("config hash mismatch: checkpoint has {found}, run expects {expected}")]
    HashMismatch { expected: String, found: String },
    /// Malformed artifact file.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
