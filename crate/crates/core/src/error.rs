use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input that violates an operation's preconditions (shape, range, finiteness).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An API used out of order, e.g. a backward pass with no cached forward.
    #[error("usage error: {0}")]
    Usage(String),

    /// A serialized container failed validation.
    #[error("malformed {field} at byte offset {offset}: {reason}")]
    Format {
        field: &'static str,
        offset: usize,
        reason: String,
    },

    #[error("missing prerequisite file {0}")]
    MissingPrerequisite(PathBuf),

    /// Non-finite values in a loss, gradient or activation.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
