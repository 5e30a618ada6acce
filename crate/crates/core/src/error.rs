use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("point too close to the simplex boundary (min coordinate {min_coord:e}, required {required:e})")]
    BoundaryProximity { min_coord: f64, required: f64 },
    #[error("rate matrix is not irreducible")]
    NotIrreducible,
    #[error("linear solver hit a singular system: {0}")]
    SolverSingular(String),
    #[error("time step too large: coordinate {value:e} below -1e-9 at t = {time}")]
    StepTooLarge { time: f64, value: f64 },
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("measure charges state {0} which has zero reference mass")]
    SupportViolation(usize),
    #[error("quadrature failed to reach tolerance (estimated error {0:e})")]
    QuadratureFailure(f64),
    #[error("point is not a fixed point (residual {0:e})")]
    NotFixedPoint(f64),
    #[error("distribution is not stationary for the rate matrix (residual {0:e})")]
    NotStationary(f64),
    #[error("rate matrix is not reversible (detailed balance defect {0:e})")]
    NotReversible(f64),
    #[error("exponent {0} exceeds the overflow guard")]
    OverflowGuard(f64),
    #[error("Lagrangian is infinite: flux lies outside the effective domain")]
    Infeasible,
    #[error("optimizer reached the iteration cap ({0})")]
    MaxIterations(usize),
    #[error("state space too large: {states} states exceeds {limit}")]
    TooLarge { states: usize, limit: usize },
    #[error("distribution has zero mass where a positive mass is required")]
    ZeroMass,
    #[error("expression error: {0}")]
    Expression(String),
}

pub type Result<T> = core::result::Result<T, Error>;
