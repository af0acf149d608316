use thiserror::Error;

/// Errors raised by model construction, explanation and detection routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("matrix is not symmetric (entry ({row}, {col}) differs by {diff:e})")]
    NotSymmetric { row: usize, col: usize, diff: f64 },

    #[error("matrix is not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("precision matrix is ill-conditioned (|omega*sigma - I| = {residual:e})")]
    IllConditioned { residual: f64 },

    #[error("index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },

    #[error("indices overlap: {0}")]
    IndexOverlap(String),

    #[error("dimension {dim} exceeds the enumeration limit {limit}")]
    DimensionTooLarge { dim: usize, limit: usize },

    #[error("empty subset")]
    EmptySubset,

    #[error("least-squares subproblem on {0:?} is singular")]
    SingularSubproblem(Vec<usize>),

    #[error("probability level {0} is outside (0, 1)")]
    InvalidLevel(f64),

    #[error("degrees of freedom must be positive")]
    InvalidDof,

    #[error("non-centrality {0} is negative")]
    NegativeLambda(f64),

    #[error("invalid parameter {name}: {value}")]
    InvalidParameter { name: &'static str, value: f64 },

    #[error("column {0} has zero MAD")]
    DegenerateColumn(usize),

    #[error("need more than {cols} rows, got {rows}")]
    InsufficientRows { rows: usize, cols: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("missing results: {0}")]
    MissingResults(String),

    #[error("unsupported report schema (expected version {expected}, found {found})")]
    SchemaVersionMismatch { expected: u32, found: String },
}

impl Error {
    /// True for failures caused by the numbers themselves rather than malformed input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::IllConditioned { .. }
                | Error::SingularSubproblem(_)
                | Error::NotSymmetric { .. }
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
