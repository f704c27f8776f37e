//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HomError>;

#[derive(Debug, Error)]
pub enum HomError {
    #[error("definition error in coefficient `{coefficient}`: {message}")]
    Definition { coefficient: String, message: String },

    #[error("numeric error: non-finite value of `{what}` at {location}")]
    NonFinite { what: String, location: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("grid error: {0}")]
    Grid(String),

    #[error("discretization failure: {0}")]
    Discretization(String),

    #[error("resolution failure: {0}")]
    Resolution(String),

    #[error("compatibility violation: RHS not centered against p, |∫ φ p dx| = {measured:.3e} exceeds {tolerance:.3e}")]
    Compatibility { measured: f64, tolerance: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("cache error: {0}")]
    Cache(String),

    #[error("stage `{stage}` failed (artifact {artifact}): {source}")]
    Stage {
        stage: String,
        artifact: String,
        #[source]
        source: Box<HomError>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl HomError {
    pub fn usage(msg: impl Into<String>) -> Self {
        HomError::Usage(msg.into())
    }

    pub fn non_finite(what: impl Into<String>, location: impl std::fmt::Display) -> Self {
        HomError::NonFinite {
            what: what.into(),
            location: location.to_string(),
        }
    }
}
