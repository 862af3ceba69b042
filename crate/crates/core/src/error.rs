use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing required field `{0}`")]
    MissingField(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("timestep {t} out of range 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("adapter incompatible with model: {0}")]
    IncompatibleAdapter(String),

    #[error("non-finite loss at step {step} (batch ids: {batch_ids:?})")]
    NonFiniteLoss { step: usize, batch_ids: Vec<String> },

    #[error("training diverged at step {step}; last good checkpoint: {last_good:?}")]
    Diverged {
        step: usize,
        last_good: Option<PathBuf>,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("corpus `{0}` is not indexed")]
    Unindexed(String),

    #[error("embedder failure: {0}")]
    Embedder(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Broad category used for process exit codes.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::MissingField(_)
                | Error::UnknownLayer(_)
                | Error::IncompatibleAdapter(_)
                | Error::TimestepOutOfRange { .. }
                | Error::Unindexed(_)
        )
    }
}
