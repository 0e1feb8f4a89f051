use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error in {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A masked reduction was asked to average over zero pixels.
    #[error("empty support: {0}")]
    EmptySupport(String),

    #[error("degenerate embedding: norm {norm:e} is not above {eps:e}")]
    DegenerateEmbedding { norm: f64, eps: f64 },

    #[error("stream protocol violation: {0}")]
    Protocol(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("lifecycle error: {0}")]
    Lifecycle(String),

    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: usize, msg: String },

    #[error("report error: missing runs {0:?}")]
    MissingRuns(Vec<String>),
}

/// Coarse error families, used by the CLI to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Training,
    Protocol,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Training => 4,
            ErrorCategory::Protocol => 5,
        }
    }
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::Lifecycle(_) => ErrorCategory::Config,
            Error::Format { .. } | Error::Io { .. } | Error::MissingRuns(_) => ErrorCategory::Data,
            Error::EmptySupport(_)
            | Error::DegenerateEmbedding { .. }
            | Error::Contract(_)
            | Error::Diverged { .. } => ErrorCategory::Training,
            Error::Protocol(_) => ErrorCategory::Protocol,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
