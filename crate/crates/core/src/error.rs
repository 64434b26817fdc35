use std::path::PathBuf;

/// Crate-wide error type. Every failure is classified so the CLI can map it
/// onto a stable exit code (usage = 2, data = 3, numeric = 4).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad invocation: unknown flags, missing arguments, invalid combinations.
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed or inconsistent input data (datasets, snapshots, checkpoints).
    #[error("data error: {0}")]
    Data(String),

    /// Numeric failure: shape mismatches, non-finite values, degenerate inputs.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Data(_) | Error::Io { .. } => 3,
            Error::Numeric(_) => 4,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
