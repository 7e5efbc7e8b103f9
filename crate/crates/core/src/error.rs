use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite {0}")]
    NonFinite(&'static str),

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("singular innovation covariance (condition estimate {condition:.3e})")]
    SingularInnovation { condition: f64 },

    #[error("particle weights degenerate: {0}")]
    DegenerateWeights(String),

    #[error("localization lost: every particle weight collapsed")]
    LocalizationLost,

    #[error("track generation failed after {attempts} attempts")]
    TrackGeneration { attempts: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }
}
