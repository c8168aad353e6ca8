use thiserror::Error;

pub type Result<T> = std::result::Result<T, RiesError>;

#[derive(Debug, Error)]
pub enum RiesError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("capacity exceeded: {what} needs {needed}, limit is {limit}")]
    Capacity { what: String, needed: usize, limit: usize },

    #[error("eigensolver failure: {0}")]
    Eigen(String),

    #[error("matrix is not in the ergodic class: {0}")]
    NotInClass(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
