use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("point {point:?} lies outside the domain")]
    DomainViolation { point: Vec<f64> },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("region is unbounded")]
    UnboundedRegion,

    #[error("region is empty")]
    EmptyRegion,

    /// The slope gap is zero or undefined, so the bound certifies nothing
    /// tighter than the region itself.
    #[error("degenerate bound: radius equals the region diameter {region_diameter}")]
    DegenerateBound { region_diameter: f64 },

    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("objective evaluated to {value} at {point:?}")]
    Evaluation { point: Vec<f64>, value: f64 },

    #[error("malformed document: {0}")]
    Format(String),

    #[error("linear program failed: {0}")]
    Solver(String),
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Format(err.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        Error::Format(err.to_string())
    }
}
