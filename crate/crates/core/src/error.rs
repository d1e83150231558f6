use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up (wrong rank, channel count, length).
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Convolution/pooling geometry does not produce a whole output grid.
    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A structural edit would break the network (empty layer, output layer growth, ...).
    #[error("structural error: {0}")]
    Structural(String),

    /// The saliency ledger no longer matches the network it was built for.
    #[error("stale saliency ledger: {0}")]
    StaleLedger(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f32 },

    #[error("{path}: bad magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },

    #[error("{path}: truncated file, expected {expected} bytes but found {actual}")]
    Truncated { path: PathBuf, expected: u64, actual: u64 },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn geometry(msg: impl Into<String>) -> Self {
        Error::Geometry(msg.into())
    }

    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }
}
