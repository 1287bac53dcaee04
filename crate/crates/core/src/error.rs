use thiserror::Error;

/// Failure modes shared by every estimator in the crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no endemic equilibrium: R0 = {r0} <= 1")]
    NoEndemicEquilibrium { r0: f64 },

    #[error("{method} is not applicable: {reason}")]
    NotApplicable { method: &'static str, reason: String },

    #[error("argument outside the domain of {method}: {reason}")]
    OutOfDomain { method: &'static str, reason: String },

    #[error("numerical failure in {what}: achieved residual {residual:e}")]
    NumericalFailure { what: &'static str, residual: f64 },

    #[error("eigensolver did not converge after {iterations} iterations (last change {change:e})")]
    EigenNonConvergence { iterations: usize, change: f64 },

    #[error("overflow in {0}")]
    Overflow(&'static str),

    #[error("mesh generation failed: {0}")]
    MeshFailure(String),

    #[error("heteroclinic shooting failed: closest approach {closest:e} at t = {time}")]
    BvpFailure { closest: f64, time: f64 },

    #[error("resolution too coarse in {what}: error estimate {estimate:e}")]
    InsufficientResolution { what: &'static str, estimate: f64 },

    #[error("all {n_paths} paths hit the time cap {time_cap}")]
    TimeCapTooSmall { n_paths: usize, time_cap: f64 },

    #[error("state space of {size} states exceeds the solver limit {limit}")]
    TooLarge { size: usize, limit: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
