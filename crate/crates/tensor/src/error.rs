use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch on axis `{axis}`: {message}")]
    ShapeMismatch { axis: String, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("batch normalization in train mode needs batch size >= 2, got {batch}")]
    BatchTooSmall { batch: usize },

    #[error("volume file {path}: bad magic (expected V3F1)")]
    BadMagic { path: String },

    #[error("volume file {path}: size mismatch, expected {expected} bytes, found {actual}")]
    SizeMismatch {
        path: String,
        expected: u64,
        actual: u64,
    },

    #[error("volume file {path}: {source}")]
    VolumeIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl TensorError {
    pub fn shape(axis: impl Into<String>, message: impl Into<String>) -> Self {
        TensorError::ShapeMismatch {
            axis: axis.into(),
            message: message.into(),
        }
    }
}
