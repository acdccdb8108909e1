//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Dimensions of an operand do not match what the operation requires.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration value violates a construction-time constraint.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was called on a value in the wrong mode or channel.
    #[error("usage error: {0}")]
    Usage(String),

    /// An operation depends on state that was never established.
    #[error("state error: {0}")]
    State(String),

    /// A non-finite value appeared where a finite one is required.
    #[error("numerical error: {0}")]
    Numeric(String),

    /// A binary input file could not be decoded.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
