use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared by every module in this crate.
///
/// Numeric routines reject ill-shaped or non-finite input instead of
/// propagating NaNs, and file loaders point at the exact line or record
/// that failed so a broken artifact can be fixed by hand.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("format error in record {index}: {message}")]
    Format { index: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing input: {0}")]
    MissingInput(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
