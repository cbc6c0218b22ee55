use std::path::PathBuf;

use thiserror::Error;

/// Every failure the toolkit can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid frame size {height}x{width}")]
    InvalidFrameSize { height: u32, width: u32 },
    #[error("malformed RLE: {0}")]
    MalformedRle(String),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("operation requires a nonempty mask")]
    EmptyMask,
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("schema error at {location}: {message}")]
    Schema { location: String, message: String },
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset has nothing to evaluate: {0}")]
    EmptyDataset(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("vector norm is too small to normalize")]
    ZeroVector,
    #[error("non-finite value: {0}")]
    NonFiniteValue(String),
    #[error("target class {target} outside 1..={class_count}")]
    BadTarget { target: u32, class_count: usize },
    #[error("target cosine {cos} too close to +/-1 for a stable gradient")]
    SingularAngle { cos: f64 },
    #[error("mask covers no feature cells at any pyramid level")]
    EmptyMaskRegion,
    #[error("loss diverged in phase '{phase}' epoch {epoch}: {loss}")]
    DivergedLoss { phase: String, epoch: usize, loss: f64 },
    #[error("unsupported or corrupt file: {0}")]
    VersionMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn schema(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            location: location.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
