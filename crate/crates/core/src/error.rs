use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CosegError>;

#[derive(Debug, Error)]
pub enum CosegError {
    /// A configuration value is out of its documented range.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation received inputs violating its preconditions.
    #[error("input error: {0}")]
    Input(String),

    /// On-disk data is malformed; always names the offending path.
    #[error("data error at {path}: {msg}")]
    Data { path: PathBuf, msg: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    /// A loss or metric became NaN/Inf; names the offending component.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Total loss exceeded the divergence guard.
    #[error("training diverged at step {step}: total loss {total}")]
    Diverged { step: u64, total: f64 },

    /// Checkpoint container version not understood by this build.
    #[error("checkpoint version mismatch at {path}: found {found}, expected {expected}")]
    CheckpointVersion {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
}

impl CosegError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CosegError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        CosegError::Data {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code contract: 2 usage/config, 3 data, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CosegError::Config(_) | CosegError::Input(_) => 2,
            CosegError::Data { .. }
            | CosegError::Io { .. }
            | CosegError::Image { .. }
            | CosegError::CheckpointVersion { .. } => 3,
            CosegError::Numeric(_) | CosegError::Diverged { .. } => 4,
        }
    }
}
