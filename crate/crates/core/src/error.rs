use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the packing primitives, the model format, image
/// handling and the forward pass.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("unsupported kernel size {0}: must be odd with K*K <= 32")]
    UnsupportedKernel(usize),

    #[error("corrupt packed data: {0}")]
    Corrupt(String),

    #[error("bad magic {found:?}, expected \"BCNN\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated stream at byte offset {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },

    #[error("invalid model at layer {layer}: {reason}")]
    Validation { layer: usize, reason: String },

    #[error("invalid model: {0}")]
    Model(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("image format error: {0}")]
    Image(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
