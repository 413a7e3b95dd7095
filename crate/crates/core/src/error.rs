use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shape disagreement. Carries enough context to see
    /// which dimensions clashed without a debugger.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("audio input rejected: {0}")]
    Audio(String),

    #[error("model file corrupt at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("manifest error at row {row}: {reason}")]
    Manifest { row: usize, reason: String },

    #[error("prune plan invalid: {0}")]
    PrunePlan(String),

    #[error("share plan invalid: {0}")]
    SharePlan(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}
