use std::fmt;
use std::path::PathBuf;

/// Coarse failure class, used by the command-line front end to pick an exit
/// category that scripts can match on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
    Io,
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Data => "data",
            ErrorCategory::Numeric => "numeric",
            ErrorCategory::Io => "io",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{path}: {source}")]
    IoAt {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("taxonomy fingerprint mismatch between datastore and query taxonomy")]
    TaxonomyMismatch,

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("no neighbors available to form a distribution")]
    EmptyNeighborSet,

    #[error("loss diverged (non-finite) at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Io(_) | Error::IoAt { .. } => ErrorCategory::Io,
            Error::Config(_) | Error::MissingArtifact(_) | Error::TaxonomyMismatch => {
                ErrorCategory::Config
            }
            Error::Diverged { .. } | Error::Numeric(_) => ErrorCategory::Numeric,
            Error::Parse { .. }
            | Error::Data(_)
            | Error::Format(_)
            | Error::DimensionMismatch { .. }
            | Error::TokenOutOfRange { .. }
            | Error::VocabMismatch(_)
            | Error::EmptyNeighborSet
            | Error::Json(_) => ErrorCategory::Data,
        }
    }

    pub(crate) fn io_at(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoAt {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
