use std::path::PathBuf;

/// Unified error type for the whole pipeline.
///
/// The CLI maps variants onto exit codes: configuration/usage problems → 2,
/// numeric failures → 3, file-format and I/O problems → 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    #[error("shape: {0}")]
    Shape(String),

    #[error("numeric: {0}")]
    Numeric(String),

    #[error("format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) => 2,
            Error::Numeric(_) => 3,
            Error::Format(_) | Error::Io { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
