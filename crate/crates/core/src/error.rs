use thiserror::Error;

/// Errors raised across schedules, the token process, samplers and the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("domain mismatch: {0}")]
    DomainMismatch(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("grid error: {0}")]
    Grid(String),

    #[error("AR step {step}: {source}")]
    ArStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { field, reason: reason.into() }
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::ArStep { step, source: Box::new(self) }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
