use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("no gradient available: {0}")]
    NoGrad(String),

    #[error("unknown character {ch:?} at offset {offset}")]
    UnknownChar { ch: char, offset: usize },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("assertion failed: {0}")]
    Assertion(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::UnknownChar { .. } | Error::Json(_) => 2,
            Error::MissingArtifact(_) => 3,
            Error::Assertion(_) | Error::Contract(_) => 4,
            _ => 1,
        }
    }
}
