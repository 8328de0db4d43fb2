use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("backward: output must hold exactly one element, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("backward: node {0} is not on this tape")]
    UnknownNode(usize),

    #[error("backward: node {0} does not track gradients")]
    NotTracked(usize),

    #[error("layer {index} ({layer}): {detail}")]
    Layer { index: usize, layer: String, detail: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGradient(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("epoch {epoch} out of range for {total} epochs")]
    EpochOutOfRange { epoch: usize, total: usize },

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
