use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// Variants are grouped so that callers (the CLI in particular) can map them
/// onto coarse exit categories with [`Error::kind`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset layout error at {path}: {reason}")]
    Layout { path: PathBuf, reason: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("cannot decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("cannot load weights: {0}")]
    Load(String),

    #[error("non-finite loss at step {step} (diagnostic checkpoint: {checkpoint:?})")]
    NonFinite {
        step: usize,
        checkpoint: Option<PathBuf>,
    },

    #[error("training interrupted at step {step}")]
    Interrupted { step: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    DataOrConfig,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NonFinite { .. } => ErrorKind::Numerical,
            _ => ErrorKind::DataOrConfig,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
