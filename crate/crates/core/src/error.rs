use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the adaptation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("zero-norm vector: {0}")]
    ZeroVector(String),

    #[error("every candidate row is excluded from the search")]
    AllExcluded,

    #[error("no confident samples")]
    NoConfidentSamples,

    #[error("chain search from sample {start} visited every sample without reaching the confident set")]
    ChainExhausted { start: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("no rows")]
    NoRows,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch}, iteration {iteration}")]
    NonFiniteLoss { epoch: usize, iteration: usize },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: malformed checkpoint: {message}", path.display())]
    Checkpoint { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code: 2 for configuration or input-shape problems, 3 for
    /// file problems, 4 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidInput(_) | Error::ShapeMismatch(_) => 2,
            Error::Io { .. } | Error::Checkpoint { .. } | Error::Parse { .. } | Error::NoRows => 3,
            Error::NonFinite(_)
            | Error::ZeroVector(_)
            | Error::AllExcluded
            | Error::NoConfidentSamples
            | Error::ChainExhausted { .. }
            | Error::NonFiniteLoss { .. } => 4,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            2 => "config",
            3 => "io",
            _ => "numeric",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
