use thiserror::Error;

/// Errors raised by the numeric routines, the trainer and the experiment harness.
#[derive(Debug, Error)]
pub enum FpoError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite result: {0}")]
    NonFinite(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("support mismatch: {0}")]
    Support(String),
    #[error("degenerate reward: {0}")]
    DegenerateReward(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid length: {0}")]
    Length(String),
    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },
    #[error("optimization failed: {0}")]
    Optimization(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl FpoError {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            FpoError::NonFinite(_)
                | FpoError::Divergence { .. }
                | FpoError::Optimization(_)
                | FpoError::DegenerateReward(_)
        )
    }
}

pub type Result<T, E = FpoError> = std::result::Result<T, E>;
