use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the editing pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("count mismatch: {what} (expected {expected}, found {found})")]
    CountMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("numerical error{}: {message}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Numerical { step: Option<usize>, message: String },

    #[error("degenerate timestep t={0}: alpha(t) is zero")]
    DegenerateTimestep(f64),

    #[error("guidance provider failure: {0}")]
    Guidance(String),

    #[error("feature extractor failure: {0}")]
    Feature(String),

    #[error("embedding provider failure: {0}")]
    Embedding(String),

    #[error("checkpoint version error: {0}")]
    Version(String),

    #[error("checkpoint config mismatch: stored hash {stored:016x}, current {current:016x}")]
    ConfigMismatch { stored: u64, current: u64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {message}")]
    Image { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used by the command line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
    Io,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Data => "data",
            ErrorCategory::Numeric => "numeric",
            ErrorCategory::Io => "io",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config | ErrorCategory::Data => 2,
            ErrorCategory::Numeric => 3,
            ErrorCategory::Io => 4,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn numerical(step: Option<usize>, message: impl Into<String>) -> Self {
        Error::Numerical {
            step,
            message: message.into(),
        }
    }

    /// Attaches a training step index to numerical errors that lack one.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            Error::Numerical { step: None, message } => Error::Numerical {
                step: Some(step),
                message,
            },
            other => other,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::ConfigMismatch { .. } | Error::InvalidArgument(_) => {
                ErrorCategory::Config
            }
            Error::Numerical { .. } | Error::DegenerateTimestep(_) => ErrorCategory::Numeric,
            Error::Io { source, .. } if source.kind() != std::io::ErrorKind::NotFound => {
                ErrorCategory::Io
            }
            _ => ErrorCategory::Data,
        }
    }
}
