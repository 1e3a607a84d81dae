use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("insufficient support: {found} points within radius (need {needed})")]
    InsufficientSupport { found: usize, needed: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("forward cache does not match the parameters or patch passed to backward")]
    InvalidCache,

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no descriptors could be computed ({failed} keypoints failed)")]
    EmptyDescriptorSet { failed: usize },

    #[error("covariance has {positive} positive eigenvalues, {bits} bits requested")]
    InsufficientRank { positive: usize, bits: usize },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::DegenerateGeometry(msg.into())
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
