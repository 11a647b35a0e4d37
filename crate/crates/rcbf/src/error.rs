use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("integration fault at t = {t}: {reason}")]
    IntegrationFault { t: f64, reason: String },

    #[error("scenario fault at t = {t}: {reason}")]
    ScenarioFault { t: f64, reason: String },

    #[error("QP solver fault: {0}")]
    SolverFault(String),

    #[error("matching condition failed: {0}")]
    MatchingFailure(String),

    #[error("design condition violated: {0}")]
    DesignCondition(String),

    #[error("barrier cascade inconsistent at level {level}: mismatch {mismatch:e}")]
    CascadeInconsistency { level: usize, mismatch: f64 },

    #[error("config parse error at line {line}, column {column}: {reason}")]
    ConfigParse {
        line: usize,
        column: usize,
        reason: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("trace format error: {0}")]
    TraceFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by user-supplied configuration.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter { .. }
                | Error::ConfigParse { .. }
                | Error::Config(_)
                | Error::DesignCondition(_)
                | Error::CascadeInconsistency { .. }
                | Error::MatchingFailure(_)
        )
    }
}
