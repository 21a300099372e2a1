use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("curves live on different time grids")]
    GridMismatch,
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("invalid curve: {0}")]
    InvalidCurve(String),
    #[error("empty unit subset")]
    EmptySubset,
    #[error("invalid population: {0}")]
    InvalidPopulation(String),

    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("cannot parse cell {cell:?} at line {line}, column {column}")]
    Parse {
        line: usize,
        column: usize,
        cell: String,
    },
    #[error("missing value at line {line}, column {column}")]
    MissingData { line: usize, column: usize },
    #[error("invalid synthetic population spec: {0}")]
    Spec(String),
    #[error("strata jumpers need at least two strata (found {0})")]
    NotEnoughStrata(usize),

    #[error("infeasible design: {0}")]
    Infeasible(String),
    #[error("unit {0} is selected with certainty; B0 is undefined")]
    CensusUnit(usize),
    #[error("stratum {stratum} has sample size {size}; at least 2 are required")]
    DegenerateStratum { stratum: usize, size: usize },
    #[error("unsupported design: {0}")]
    UnsupportedDesign(String),

    #[error("empty sample")]
    EmptySample,
    #[error("exponent q = {0} is not supported; q must exceed 1")]
    UnsupportedExponent(f64),

    #[error("Weiszfeld iteration did not converge after {iterations} iterations (residual {residual:e})")]
    ConvergenceFailure {
        iterations: usize,
        residual: f64,
        last: Vec<f64>,
    },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("band depth needs at least 3 curves (got {0})")]
    SampleTooSmall(usize),

    #[error("design error: {0}")]
    Design(String),
    #[error("bootstrap needs at least 2 replicates (got {0})")]
    TooFewReplicates(usize),
    #[error("replicate-weight covariance is not positive semidefinite: {0}")]
    Covariance(String),

    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
