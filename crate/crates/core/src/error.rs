use ctes_diff::DiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid event sequence `{id}`: {reason}")]
    InvalidSequence { id: String, reason: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("labeling error: {0}")]
    Labeling(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("sequence of length {len} exceeds capacity {cap}")]
    Capacity { len: usize, cap: usize },
    #[error("attention error: {0}")]
    Attention(String),
    #[error("degenerate embedding: preconditioned gradient norm {norm:e} is below 1e-12")]
    DegenerateEmbedding { norm: f64 },
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CoreError + '_ {
    move |source| CoreError::Io {
        path: path.display().to_string(),
        source,
    }
}
