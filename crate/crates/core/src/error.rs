use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure classes, used by the CLI for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Numeric,
    Io,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Numeric => "numeric",
            ErrorCategory::Io => "io",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by layer {layer} ({kind})")]
    NonFinite { layer: usize, kind: &'static str },

    #[error(
        "infinite Fisher information: coordinate {index} has zero noise but non-zero sensitivity"
    )]
    InfiniteInformation { index: usize },

    #[error("utility budget {budget} exceeds the total available utility {available}")]
    InfeasibleBudget { budget: f64, available: f64 },

    #[error("exact Jacobian refused: m*d = {size} exceeds the limit {limit}")]
    TooLarge { size: usize, limit: usize },

    #[error("training diverged at round {round}: loss is not finite")]
    Diverged { round: usize },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_)
            | Error::Shape(_)
            | Error::InfeasibleBudget { .. }
            | Error::TooLarge { .. } => ErrorCategory::Config,
            Error::NonFinite { .. }
            | Error::InfiniteInformation { .. }
            | Error::Diverged { .. } => ErrorCategory::Numeric,
            Error::Io { .. } | Error::Csv(_) | Error::Format { .. } => ErrorCategory::Io,
        }
    }
}
