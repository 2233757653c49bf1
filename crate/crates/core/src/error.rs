use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: parse error: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error("duplicate id `{id}` (lines {first_line} and {second_line})")]
    DuplicateId {
        id: String,
        first_line: usize,
        second_line: usize,
    },

    #[error("{file}:{line}: expected {expected} values, found {found}")]
    Dimension {
        file: String,
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("invalid bridge link: {0}")]
    Bridge(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("unknown id `{id}`{hint}")]
    UnknownId { id: String, hint: String },

    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("version mismatch: file has version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag used by the command line for machine-parsable errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::DuplicateId { .. } => "duplicate_id",
            Error::Dimension { .. } => "dimension",
            Error::Bridge(_) => "bridge",
            Error::Config(_) => "config",
            Error::Precondition(_) => "precondition",
            Error::Shape(_) => "shape",
            Error::Sampling(_) => "sampling",
            Error::UnknownId { .. } => "unknown_id",
            Error::NonFinite(_) => "non_finite",
            Error::Format(_) => "format",
            Error::Version { .. } => "version",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
