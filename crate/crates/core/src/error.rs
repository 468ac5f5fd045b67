use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("crop region is empty")]
    EmptyCrop,

    #[error("grid metadata mismatch: {0}")]
    MetaMismatch(String),

    #[error("could not place {placed} of {wanted} objects after {attempts} attempts")]
    PlacementFailure {
        placed: usize,
        wanted: usize,
        attempts: usize,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("scene grid {scene:?} is smaller than chunk {chunk:?}")]
    SceneTooSmall { scene: [usize; 3], chunk: [usize; 3] },

    #[error("no candidate views")]
    NoViews,

    #[error("training diverged at step {step} (non-finite loss)")]
    DivergenceDetected { step: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    VersionUnsupported(u32),

    #[error("file truncated: {0}")]
    TruncatedFile(String),

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn io_at(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }
}
