use thiserror::Error;

/// Errors raised by the core laboratory.
#[derive(Debug, Error)]
pub enum IcpoError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("arm index {index} out of range for {arms} arms")]
    Index { index: usize, arms: usize },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("parameters are not in normal form (violation {violation:.3e})")]
    NotNormalForm { violation: f64 },

    #[error("restricted second moment is rank deficient (min eigenvalue {eigenvalue:.3e})")]
    RankDeficient { eigenvalue: f64 },

    #[error("gradient descent diverged at iteration {iteration} (loss {loss:.3e}); reduce the step size")]
    Diverged { iteration: usize, loss: f64 },

    #[error("policy entry {value:.3e} is below the exploration floor {floor:.3e}")]
    NotMixture { value: f64, floor: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, IcpoError>;
