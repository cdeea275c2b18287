use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("constraint violation: {0}")]
    ConstraintViolation(String),

    /// Memory demand cannot be met. `deficits` lists, per node, the bytes
    /// above capacity in the least-overflowing plan that was found.
    #[error("infeasible: {required} bytes required, {capacity} bytes available (deficits: {deficits:?})")]
    Infeasible {
        required: u64,
        capacity: u64,
        deficits: Vec<(u32, u64)>,
    },

    #[error("search space too large: ~{estimate} candidate plans exceeds limit {limit}")]
    SearchTooLarge { estimate: f64, limit: u64 },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("missing input field `{0}`")]
    MissingInput(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("training diverged at step {step} ({arm} arm)")]
    Divergence { step: usize, arm: &'static str },

    #[error("invalid scenario: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
