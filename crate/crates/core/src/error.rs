use thiserror::Error;

/// Errors raised across the crate. The variant names the failure class so
/// callers (and the CLI's JSON error output) can branch on it.
#[derive(Debug, Error)]
pub enum FatError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("resource error: {what} requires {count} scalars, budget is {limit}")]
    Resource { what: String, count: u128, limit: u128 },
    #[error("internal error: {0}")]
    Internal(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl FatError {
    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            FatError::Domain(_) => "domain",
            FatError::Config(_) => "config",
            FatError::Data(_) => "data",
            FatError::Resource { .. } => "resource",
            FatError::Internal(_) => "internal",
            FatError::Diverged { .. } => "diverged",
            FatError::Io(_) => "io",
            FatError::Json(_) => "json",
            FatError::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, FatError>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(FatError::Domain(msg.into()))
}

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(FatError::Config(msg.into()))
}
