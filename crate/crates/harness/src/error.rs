use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Offending keys with the reason each was rejected.
    #[error("invalid scenario: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error(transparent)]
    Core(#[from] conetrack::Error),

    #[error("malformed run log line {line}: {reason}")]
    Log { line: usize, reason: String },

    #[error("run log has no `{0}` events")]
    MissingChannel(&'static str),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub fn is_validation(&self) -> bool {
        matches!(self, HarnessError::Validation(_))
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
