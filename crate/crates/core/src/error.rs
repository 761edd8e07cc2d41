use thiserror::Error;

/// Errors produced by the scheduling, filtering and optimization routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid range: [{a}, {b}]")]
    InvalidRange { a: f64, b: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("stability condition violated: {0}")]
    Cfl(String),

    #[error("numerical blowup at t = {time}: {what}")]
    Blowup { time: f64, what: String },

    #[error("support violation: {0}")]
    Support(String),

    #[error("degenerate density: {0}")]
    Degenerate(String),

    #[error("matrix is singular or not positive definite: {0}")]
    Singular(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn blowup(time: f64, what: impl Into<String>) -> Error {
    Error::Blowup {
        time,
        what: what.into(),
    }
}
