//! Error type shared across the pipeline stages.

use std::path::PathBuf;

/// Errors produced by the segmentation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value violates its documented invariant.
    #[error("invalid config: {0}")]
    Config(String),

    /// Input data is missing, malformed, or inconsistent.
    #[error("data error: {0}")]
    Data(String),

    /// File I/O failure with the offending path attached.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Image decode/encode failure.
    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    /// Two grids that must agree in shape do not.
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    /// A numeric failure (non-finite loss or gradient) during training.
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(expected: impl std::fmt::Display, actual: impl std::fmt::Display) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
