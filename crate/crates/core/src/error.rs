use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FsceError {
    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): need finite coordinates with x2 > x1 and y2 > y1")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),

    #[error("non-finite loss component `{0}`")]
    NonFiniteLoss(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("class `{class}` has {available} instances, {required} required")]
    InsufficientInstances {
        class: String,
        available: usize,
        required: usize,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("stage mismatch: expected `{expected}`, found `{found}`")]
    StageMismatch { expected: String, found: String },

    #[error("model has no prototype for class `{0}`")]
    MissingClass(String),

    #[error("image is {actual}x{actual}, detector expects {expected}x{expected}")]
    ImageSize { expected: usize, actual: usize },

    #[error("path does not exist: {0}")]
    MissingPath(PathBuf),

    #[error("malformed {what} at line {line}: {msg}")]
    Parse {
        what: &'static str,
        line: usize,
        msg: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = FsceError> = std::result::Result<T, E>;

impl FsceError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FsceError::Io {
            path: path.into(),
            source,
        }
    }
}
