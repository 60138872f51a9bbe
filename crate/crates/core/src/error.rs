//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("categorical level {level} out of range (cardinality {cardinality})")]
    InvalidLevel { level: usize, cardinality: usize },

    #[error("x column {column} is categorical; the parametric path supports continuous columns only")]
    UnsupportedColumnType { column: usize },

    #[error("weighted design matrix is singular or rank-deficient")]
    SingularDesign,

    #[error("component {component} collapsed (responsibility mass {mass:.3e})")]
    DegenerateComponent { component: usize, mass: f64 },

    #[error("no root for target {target} inside bracket [{lo}, {hi}]")]
    NoRoot { lo: f64, hi: f64, target: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
