use thiserror::Error;

/// Errors produced by tensor ops, the CT pipeline, model assembly, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument for {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("non-finite value encountered in {op}: {detail}")]
    NonFinite { op: &'static str, detail: String },

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("data format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("checkpoint fingerprint mismatch: file was saved with a different model configuration (file {file:#018x}, expected {expected:#018x})")]
    FingerprintMismatch { file: u64, expected: u64 },

    #[error("object placement failed after {retries} retries: {detail}")]
    PlacementFailed { retries: usize, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { op, detail: detail.into() }
    }

    pub(crate) fn non_finite(op: &'static str, detail: impl Into<String>) -> Self {
        Error::NonFinite { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
