use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("unsupported dtype `{dtype}` for tensor `{name}`")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("truncated checkpoint: {0}")]
    Truncation(String),
    #[error("architecture mismatch at `{0}`")]
    ArchitectureMismatch(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("rank {k} out of range (max {max})")]
    Rank { k: usize, max: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("need at least 2 tasks, got {0}")]
    InsufficientTasks(usize),
    #[error("solver diverged at step {step}: objective {objective} > 10x initial {initial}")]
    Divergence { step: usize, objective: f64, initial: f64 },
    #[error("merge plan error: {0}")]
    Plan(String),
    #[error("index {index} out of range for {len} tasks")]
    Index { index: usize, len: usize },
    #[error("task vector {task} is zero in layer `{layer}`")]
    ZeroTaskVector { task: usize, layer: String },
    #[error("evaluation failed: {0}")]
    Evaluation(String),
    #[error("invalid range: {0}")]
    Range(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("suite invariant violated: {0}")]
    Invariant(String),
    #[error("empty batch")]
    EmptyBatch,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
