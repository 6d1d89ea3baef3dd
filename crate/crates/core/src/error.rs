use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the forecasting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed input: {0}")]
    MalformedInput(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),

    #[error("inconsistent label: {0}")]
    InconsistentLabel(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid script: {0}")]
    InvalidScript(String),

    #[error("training diverged at step {step}")]
    TrainingDiverged { step: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerics (divergence, broken covariances)
    /// rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::TrainingDiverged { .. } | Error::InvalidCovariance(_)
        )
    }
}
