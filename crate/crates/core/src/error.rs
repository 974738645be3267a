use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    DimensionMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("empty dimension in {0}")]
    EmptyDimension(&'static str),
    #[error("decomposition failed: {0}")]
    Decomposition(String),
    #[error("dictionary construction failed after {attempts} attempts: {reason}")]
    DictionaryConstruction { attempts: usize, reason: String },
    #[error("non-finite value in {context}: {value}")]
    NonFinite { context: String, value: f64 },
    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: u64, reason: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("ill-conditioned probe: {0}")]
    IllConditioned(String),
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
