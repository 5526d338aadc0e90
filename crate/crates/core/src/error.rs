use thiserror::Error;

/// Errors produced by the planning stack.
#[derive(Debug, Error)]
pub enum PlanError {
    #[error("point or cell out of bounds: {0}")]
    OutOfBounds(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("search exceeded its budget after {expanded} high-level nodes")]
    Timeout { expanded: usize },
    #[error("no feasible path: {0}")]
    Infeasible(String),
    #[error("solver failed after {iterations} iterations: {reason}")]
    Solver {
        reason: String,
        iterations: usize,
        /// Last accepted iterate of the stacked decision vector.
        last_iterate: Vec<f64>,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PlanError>;
