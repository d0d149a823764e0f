use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("unknown task id {task} (model has {heads} heads)")]
    UnknownTask { task: usize, heads: usize },

    #[error("tape does not match the model: {0}")]
    StaleTape(&'static str),

    #[error("training diverged{}: {reason}", task.map(|t| format!(" on task {t}")).unwrap_or_default())]
    Divergence { task: Option<usize>, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid weight vector: {0}")]
    InvalidWeights(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("infeasible task correlation: Gram matrix is not positive semi-definite (pivot {pivot} at task {task})")]
    InfeasibleCorrelation { task: usize, pivot: f64 },

    #[error("degenerate target for task {task} column {column}: zero variance")]
    ZeroVariance { task: usize, column: usize },

    #[error("rows with missing values: {rows:?}")]
    MissingValues { rows: Vec<usize> },

    #[error("source '{0}' is declared in the schema but has no rows")]
    EmptySource(String),

    #[error("incomplete run grid along axis '{axis}': missing cells {missing:?}")]
    IncompleteGrid { axis: String, missing: Vec<String> },

    #[error("broken exploit chain: {0}")]
    BrokenChain(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("all population members failed: {0}")]
    PopulationFailed(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
