//! Error type shared by all modules.

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("spike not aligned with the time grid: {0}")]
    Alignment(String),

    #[error("control outside the admissible set: {0}")]
    Control(String),

    #[error("simulation diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("linear solve failed: {0}")]
    Solver(String),

    #[error("regression failed at step {step}: {detail}")]
    Regression { step: usize, detail: String },

    #[error("fixed-point iteration failed to converge: {0}")]
    NonConvergence(String),

    #[error("independence violation: {0}")]
    Independence(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
