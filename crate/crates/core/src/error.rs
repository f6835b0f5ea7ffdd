//! Crate-wide error and invariant-violation types.

use thiserror::Error;

/// First violated invariant of a domain value, with the offending field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Path of the offending field, e.g. `coords[3].x`.
    pub path: String,
    /// Human-readable constraint that failed, e.g. `x < W`.
    pub constraint: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "field `{}`: violates `{}`", self.path, self.constraint)
    }
}

/// Validation of a domain value: `Ok(())` or the first violated invariant.
///
/// Total over malformed-but-parseable values; never panics.
pub trait Validate {
    fn validate(&self) -> std::result::Result<(), Violation>;
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value: {0}")]
    Invalid(Violation),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("loss error: {0}")]
    Loss(String),
    #[error("network error: {0}")]
    Network(String),
    #[error("training error: {0}")]
    Train(String),
    #[error("matching error: {0}")]
    Matching(String),
    #[error("metrics error: {0}")]
    Metrics(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl From<Violation> for Error {
    fn from(v: Violation) -> Self {
        Error::Invalid(v)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
