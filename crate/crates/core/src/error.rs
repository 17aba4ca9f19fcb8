use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed or inconsistent bundle content. `offset` is a byte offset for
    /// binary payloads and a 1-based line number for text files.
    #[error("{path} (offset {offset}): {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("label out of range: row {row} has label {label}, but only {classes} classes exist")]
    LabelOutOfRange { row: usize, label: usize, classes: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("invalid hyperparameters: {0}")]
    Hyperparams(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("scale matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("non-positive degrees of freedom ({0})")]
    NonPositiveDof(f64),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end: 1 for input and
    /// configuration problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NotPositiveDefinite | Error::NonPositiveDof(_) | Error::Numerical(_) => 2,
            _ => 1,
        }
    }
}
