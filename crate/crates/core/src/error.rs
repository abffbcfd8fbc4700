use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic in {0}")]
    BadMagic(PathBuf),
    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    TruncatedPayload { path: PathBuf, expected: usize, found: usize },
    #[error("invalid raster header in {path}: {reason}")]
    BadHeader { path: PathBuf, reason: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("lesion disk does not fit inside the brain: {0}")]
    LesionOutsideCortex(String),
    #[error("constant difference map: standard deviation is zero over the statistics domain")]
    ConstantDifferenceMap,
    #[error("cluster lies entirely on background and cannot be assigned a region")]
    Unassignable,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code: 2 for numeric aborts, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) | Error::ConstantDifferenceMap => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
