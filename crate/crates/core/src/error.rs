use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("empty tensor passed to {0}")]
    EmptyTensor(&'static str),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("level {level} out of range 1..={levels}")]
    LevelOutOfRange { level: usize, levels: usize },

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("stale forward trace: {0}")]
    StaleTrace(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("{0}")]
    Unsupported(String),

    #[error("threshold too aggressive: {0}")]
    EmptyMask(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data format error in {path}: {detail}")]
    DataFormat { path: PathBuf, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for the CLI: 1 config, 2 data, 3 numerical, 4 verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Architecture(_) | Error::Schedule(_) => 1,
            Error::Unsupported(_) | Error::LevelOutOfRange { .. } => 1,
            Error::DataFormat { .. } | Error::Io { .. } | Error::Checkpoint(_) => 2,
            Error::LabelOutOfRange { .. } => 2,
            Error::NonFinite(_) | Error::Numerical(_) | Error::EmptyMask(_) => 3,
            Error::Verification(_) => 4,
            Error::Dimension { .. } | Error::EmptyTensor(_) | Error::StaleTrace(_) => 4,
        }
    }
}
