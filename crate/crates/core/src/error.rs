use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// A tensor or network received an input whose shape breaks its contract.
    #[error("shape contract violated: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("cannot ingest {path}: {message}")]
    Ingestion { path: PathBuf, message: String },

    #[error("export failed: {0}")]
    Export(String),

    /// Cosine-based losses refuse vectors with zero norm.
    #[error("numeric guard: {0}")]
    NumericGuard(String),

    #[error("non-finite value in loss term `{term}` at step {step}")]
    NonFinite { term: String, step: u64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    /// Short stable tag used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::Argument(_) => "argument",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Ingestion { .. } => "ingestion",
            Error::Export(_) => "export",
            Error::NumericGuard(_) => "numeric_guard",
            Error::NonFinite { .. } => "non_finite",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Tensor(_) => "tensor",
        }
    }

    pub(crate) fn ingestion(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Ingestion {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
