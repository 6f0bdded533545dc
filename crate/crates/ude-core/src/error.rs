//! Error type shared by every module in the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for an op; names the op and the shapes involved.
    #[error("{op}: shape mismatch: {details}")]
    Shape { op: &'static str, details: String },

    /// A caller violated an API contract (non-scalar loss, missing grad, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed input file.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Stratified splitting requires at least two examples per class.
    #[error("stratification error: class {class} has {count} example(s), need at least 2")]
    Stratify { class: usize, count: usize },

    /// A loss became NaN or infinite during training.
    #[error("numeric divergence: {0}")]
    Divergence(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::Shape {
            op,
            details: details.into(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
