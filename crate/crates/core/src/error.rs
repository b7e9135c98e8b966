use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension {0}: only 1 and 2 are supported")]
    InvalidDimension(usize),
    #[error("invalid resolution {0}: need at least one interior node per axis")]
    InvalidResolution(usize),
    #[error("invalid exponent p = {0}: must be > 1")]
    InvalidExponent(f64),
    #[error("grid mismatch: fields live on different grids")]
    GridMismatch,
    #[error("field has {got} values, grid expects {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite value {value} at node {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("invalid penalization level epsilon = {0}: must be > 0")]
    InvalidEpsilon(f64),
    #[error("invalid penalty exponent q_tilde = {0}: must lie in (1, 2]")]
    InvalidPenaltyExponent(f64),
    #[error("invalid time step dt = {0}: must be > 0")]
    InvalidDt(f64),
    #[error("zero edge gradient with p = {p} < 2 and no regularization")]
    SingularGradient { p: f64 },
    #[error("invalid operator: {0}")]
    InvalidOperator(String),
    #[error("invalid noise: {0}")]
    InvalidNoise(String),
    #[error("invalid step configuration: {0}")]
    InvalidStepConfig(String),
    #[error("monotonicity margin violated: dt * (max(0,-kappa) + max(0,-gamma)) = {margin} >= 1")]
    MonotonicityMarginViolated { margin: f64 },
    #[error("constraint violated: initial datum below the obstacle at node {index} ({value} < {obstacle})")]
    ConstraintViolated { index: usize, value: f64, obstacle: f64 },
    #[error("newton solver did not converge after {iters} iterations (residual {residual:e})")]
    NewtonDiverged { iters: usize, residual: f64 },
    #[error("variational inequality solver stalled after {iters} iterations (complementarity {residual:e})")]
    VISolverStalled { iters: usize, residual: f64 },
    #[error("step {step} failed: {source}")]
    StepFailed {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("horizon {horizon} is not an integer multiple of dt = {dt}")]
    InvalidHorizon { horizon: f64, dt: f64 },
    #[error("invalid averaging window: burn-in {burn_in} must lie in [0, {horizon})")]
    InvalidWindow { burn_in: f64, horizon: f64 },
    #[error("unknown preset '{0}'")]
    UnknownPreset(String),
    #[error("invalid experiment parameter: {0}")]
    InvalidParameter(String),
    #[error("malformed field data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerical solvers, as opposed to bad input.
    pub fn is_solver_failure(&self) -> bool {
        match self {
            Error::NewtonDiverged { .. } | Error::VISolverStalled { .. } => true,
            Error::StepFailed { source, .. } => source.is_solver_failure(),
            _ => false,
        }
    }
}
