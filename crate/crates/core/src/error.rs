use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
///
/// The variants double as the categories the CLI reports; each maps to one
/// kind of failure a caller can act on.
#[derive(Debug, Error)]
pub enum GraftError {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("plan error: {}", .0.join("; "))]
    Plan(Vec<String>),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("training diverged at step {step} (batch {batch}): loss is {loss}")]
    NonFiniteLoss { step: usize, batch: usize, loss: f32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GraftError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GraftError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        GraftError::Format {
            offset,
            message: message.into(),
        }
    }
}

pub type Result<T, E = GraftError> = std::result::Result<T, E>;
