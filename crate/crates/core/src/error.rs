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

    #[error("image decode error: {0}")]
    Image(#[from] image::ImageError),

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error("unsupported channel count {0} (expected 1 or 3)")]
    Channels(usize),

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: String, right: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite or out-of-range value: {0}")]
    NonFinite(String),

    #[error("manifest row {row}: {message}")]
    Manifest { row: usize, message: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(left: impl std::fmt::Debug, right: impl std::fmt::Debug) -> Self {
        Error::DimensionMismatch {
            left: format!("{left:?}"),
            right: format!("{right:?}"),
        }
    }
}
