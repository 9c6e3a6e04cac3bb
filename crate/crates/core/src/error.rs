use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("backward pass called without a cached forward pass")]
    MissingCache,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("query budget exhausted")]
    BudgetExhausted,

    #[error("malformed input: {0}")]
    MalformedInput(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dims(context: &'static str, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            got,
        }
    }
}
