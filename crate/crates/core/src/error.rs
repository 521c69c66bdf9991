//! Error type shared across the pipeline.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("insufficient tissue: {found} usable pixels, need at least {required}")]
    InsufficientTissue { found: usize, required: usize },

    #[error("shape dictionary is empty: {0}")]
    EmptyDictionary(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("manifest validation failed: {0}")]
    ManifestValidation(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("output already exists: {0} (pass overwrite to replace)")]
    OutputExists(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image { path: path.into(), source }
    }

    /// Stable machine-readable tag, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InsufficientTissue { .. } => "insufficient_tissue",
            Error::EmptyDictionary(_) => "empty_dictionary",
            Error::Numeric(_) => "numeric",
            Error::NonFinite { .. } => "non_finite",
            Error::ManifestValidation(_) => "manifest_validation",
            Error::Checkpoint(_) => "checkpoint",
            Error::OutputExists(_) => "output_exists",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
        }
    }
}
