use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = BmlError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum BmlError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("not enough classes: need {needed}, split has {available}")]
    TooFewClasses { needed: usize, available: usize },

    #[error("class `{class}` has {available} images, episode needs {needed}")]
    TooFewImages {
        class: String,
        needed: usize,
        available: usize,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged: {0:?}")]
    Diverged(crate::losses::LossReport),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl BmlError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Self::ShapeMismatch(msg.into())
    }
}
