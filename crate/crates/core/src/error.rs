//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents disagree with what an operation requires.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A scalar argument is outside its admissible range.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A configuration value failed validation. `field` is the dotted key path.
    #[error("invalid configuration `{field}`: {message}")]
    Config { field: String, message: String },

    /// Federated exchange broke an invariant (missing client, layout mismatch).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// An API was used out of order, e.g. a stale forward cache.
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed dataset container.
    #[error("ingestion error at byte {offset}: {message}")]
    Ingest { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn dim(message: impl Into<String>) -> Self {
        Error::Dimension(message.into())
    }
}
