use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Rejection sampling ran out of attempts before satisfying an invariant.
    #[error("cluster generation failed after {attempts} attempts: {invariant}")]
    GenerationFailure { invariant: String, attempts: usize },

    /// The Gram matrix of a task's features is too ill-conditioned to invert.
    #[error("singular expert update: Gram condition estimate {condition:e} exceeds limit {limit:e}")]
    SingularUpdate { condition: f64, limit: f64 },

    #[error("invalid configuration field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("task {0} has no recorded expert assignment")]
    MissingAssignment(u64),

    #[error("task {0} has no recorded ground truth")]
    MissingTruth(u64),

    #[error("failed to parse {path}: {message}")]
    Parse { path: String, message: String },

    #[error("task {task_id} at expert {expert}: {source}")]
    Job {
        task_id: u64,
        expert: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
