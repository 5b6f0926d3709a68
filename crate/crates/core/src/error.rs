//! Error type shared by every solver stage.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("model evaluation error: {what} is not finite at {point}")]
    ModelEvaluation { what: &'static str, point: String },

    #[error("invalid density: {0}")]
    InvalidDensity(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("scheme error at step {step}: {msg}")]
    Scheme { step: usize, msg: String },

    #[error("conservation error at step {step}: mass drift {drift:e}")]
    Conservation { step: usize, drift: f64 },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Wraps an error with the name of the sub-step that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
