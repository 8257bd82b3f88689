use thiserror::Error;

pub type Result<T> = std::result::Result<T, GodError>;

/// Errors raised by the design, inference and search routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GodError {
    #[error("design entry ({row}, {col}) = {value} lies outside [-1, 1]")]
    BoundsViolation { row: usize, col: usize, value: f64 },

    #[error("data error: {0}")]
    Data(String),

    #[error("term references variable {index} but the design has {k} variables")]
    SpecMismatch { index: usize, k: usize },

    #[error("no replicated treatments (d = 0); pure-error variance is undefined")]
    NoReplication,

    #[error("matrix is singular or rank deficient: {0}")]
    Rank(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("linear predictor overflow: |eta| = {0} exceeds 700")]
    Overflow(f64),

    #[error("posterior mode search did not converge (best gradient norm {grad_norm:.3e})")]
    ModeNotConverged { best: Vec<f64>, grad_norm: f64 },

    #[error("Hessian is indefinite beyond repair: {0}")]
    Curvature(String),

    #[error("target parameter solve failed: {0}")]
    TargetSolve(String),

    #[error("degrees of freedom must be positive (n = {n}, p = {p})")]
    DegreesOfFreedom { n: usize, p: usize },

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("Gaussian process fit failed: {0}")]
    GpFit(String),

    #[error("Monte Carlo estimate rejected: {failures} of {b} samples failed (first: {first})")]
    TooManyFailures { failures: usize, b: usize, first: String },

    #[error("optimizer stuck: all {} candidate evaluations were -inf", trace.records.len())]
    Stuck { trace: Box<crate::exchange::OptimizationTrace> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl GodError {
    /// True for failures caused by bad input rather than numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            GodError::BoundsViolation { .. }
                | GodError::Data(_)
                | GodError::SpecMismatch { .. }
                | GodError::Config(_)
                | GodError::Io(_)
        )
    }
}

impl From<std::io::Error> for GodError {
    fn from(e: std::io::Error) -> Self {
        GodError::Io(e.to_string())
    }
}

impl From<csv::Error> for GodError {
    fn from(e: csv::Error) -> Self {
        GodError::Io(e.to_string())
    }
}
