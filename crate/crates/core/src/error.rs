use std::path::PathBuf;

use crate::volgrid::Axis;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("size mismatch: expected {expected} bytes, found {found}")]
    SizeMismatch { expected: u64, found: u64 },

    #[error("index out of bounds: {0}")]
    Bounds(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite activation after layer {layer}")]
    Numeric { layer: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("incompatible weights: {0}")]
    Incompatible(String),

    #[error("localization failed: no slice above threshold along the {axis} axis")]
    LocalizationFailure { axis: Axis },

    #[error("grid mismatch: {0}")]
    Grid(String),

    #[error("surface distance undefined: {0}")]
    UndefinedDistance(String),

    #[error("count mismatch: {0}")]
    CountMismatch(String),

    #[error("{path}: {source}")]
    FileIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::FileIo {
            path: path.into(),
            source,
        }
    }
}
