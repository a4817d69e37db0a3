use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DearError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DearError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("resource limit: {0}")]
    ResourceLimit(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("mask generation failed: {0}")]
    GenerationFailure(String),
}

impl DearError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        DearError::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DearError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        DearError::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            DearError::InvalidArgument(_) | DearError::GenerationFailure(_) => 2,
            DearError::Io { .. } | DearError::Image { .. } | DearError::Format { .. } => 3,
            DearError::ResourceLimit(_) => 4,
            DearError::Divergence(_) => 5,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::DearError::InvalidArgument(format!($($arg)+)));
        }
    };
}

pub(crate) use ensure;
