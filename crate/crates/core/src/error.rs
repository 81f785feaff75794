//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("non-finite value in {context}{}", detail.as_ref().map(|d| format!(": {d}")).unwrap_or_default())]
    NonFinite {
        context: String,
        detail: Option<String>,
    },

    #[error("invalid argument for {context}: {message}")]
    InvalidArgument { context: String, message: String },

    #[error("archive error in {path}: {message}")]
    Archive { path: String, message: String },

    #[error("missing weights file {path}: {message}")]
    MissingWeights { path: String, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error in {path}: {message}")]
    Data { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidArgument {
            context: context.into(),
            message: message.into(),
        }
    }

    pub fn shape(context: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
            detail: None,
        }
    }
}
