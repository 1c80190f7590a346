use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("boundary must start strictly above the initial demand: S(t0) = {boundary} <= y0 = {start}")]
    BoundaryBelowStart { boundary: f64, start: f64 },

    #[error("kernel evaluated too close to its diagonal (t - s = {lag:e})")]
    SingularProximity { lag: f64 },

    #[error("truncation window [{lower}, {upper}] carries no probability mass")]
    DegenerateTruncation { lower: f64, upper: f64 },

    #[error("Newton iteration did not converge at t = {time}: residual {residual:e} after {iterations} iterations")]
    NewtonFailure {
        time: f64,
        residual: f64,
        iterations: usize,
    },

    #[error("density lost positivity on edge `{edge}` at t = {time}")]
    NonPositiveDensity { edge: String, time: f64 },

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("network: {0}")]
    Network(String),

    #[error("conversion quadratic has no nonnegative root for withdrawal {0}")]
    Conversion(f64),

    #[error("empty cost horizon: t* = {t_star} >= T = {horizon}")]
    EmptyHorizon { t_star: f64, horizon: f64 },

    #[error("simulation failed at time level {level}")]
    StepFailure {
        level: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("scenario: {0}")]
    Scenario(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
