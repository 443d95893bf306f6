use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or parameter dimensions disagree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Layer or network description is invalid.
    #[error("invalid network: {0}")]
    Network(String),

    /// No valid tiling exists for the requested grid.
    #[error("infeasible tile plan: {0}")]
    Plan(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid config: {0}")]
    Config(String),

    /// Two runs that must be bit-identical were not.
    #[error("nondeterminism detected: {0}")]
    Nondeterminism(String),

    #[error("malformed fixture: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
