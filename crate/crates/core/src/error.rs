use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed fixture: {0}")]
    Format(String),

    #[error("division by zero: {0}")]
    Division(String),

    #[error("model spec error at line {line}, column {column}: {message}")]
    Spec {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("non-finite loss {value} at step {step}")]
    Numeric { step: usize, value: f64 },

    #[error("{implementation} disagrees with the direct kernel by {diff:e}")]
    Mismatch { implementation: String, diff: f64 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
