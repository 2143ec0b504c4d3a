use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("unsupported pixel format in {path}: {format}")]
    UnsupportedFormat { path: PathBuf, format: String },

    #[error("image codec failure: {0}")]
    Codec(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("feature depth mismatch: model expects depth {expected}, got depth {actual}")]
    DepthMismatch { expected: usize, actual: usize },

    #[error("backward called before any forward pass was recorded")]
    NoForward,

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("unknown class label `{0}`")]
    UnknownClass(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("checkpoint format error in section `{section}`: {message}")]
    Format { section: String, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(section: &str, message: impl Into<String>) -> Self {
        Error::Format {
            section: section.to_string(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
