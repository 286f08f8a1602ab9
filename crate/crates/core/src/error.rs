use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the fusion toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition of an operation was not met (bad shapes, bad arguments).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration (unknown filter name, missing weight file, ...).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {reason}")]
    Io { path: PathBuf, reason: String },

    /// Malformed network weight file.
    #[error("weight file format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("training diverged at epoch {epoch} (loss is not finite)")]
    Diverged { epoch: usize },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Io {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    pub(crate) fn format(offset: usize, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }

    /// True for errors caused by the file system rather than by bad input.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
