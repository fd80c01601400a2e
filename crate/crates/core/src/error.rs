use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown dataset `{0}` (expected one of cifar10, cifar100, tinyimagenet, synthetic-gaussians)")]
    UnknownDataset(String),

    #[error("failed to load dataset from {path}: {reason}")]
    DatasetLoad { path: PathBuf, reason: String },

    #[error("invalid split: {0}")]
    Split(String),

    #[error("non-finite values in {context}: {detail}")]
    NonFinite { context: String, detail: String },

    #[error("memory buffer: {0}")]
    Buffer(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("strategy `{strategy}` requires {missing}")]
    MissingInput { strategy: String, missing: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("plot rendering failed: {0}")]
    Plot(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::UnknownDataset(_)
                | Error::Split(_)
                | Error::Config(_)
        )
    }
}
