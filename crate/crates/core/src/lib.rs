//! Expected time to extinction for stochastic SIS endemic infection models.
//!
//! Exact Markov-chain answers, closed-form and asymptotic approximations,
//! diffusion approximations (1-D quadrature and a 2-D finite element solve),
//! the large-deviations action, and Monte Carlo oracles.

pub mod approx;
pub mod error;
pub mod diffusion1d;
pub mod exact;
pub mod fem;
pub mod hamiltonian;
pub mod linalg;
pub mod model;
pub mod par;
pub mod quad;
pub mod roots;
pub mod ssa;

pub use error::{Error, Result};
pub use exact::{mean_extinction_times, norden_tau, quasi_stationary, QsdResult};
pub use model::{r0_and_equilibria, ModelParams, StateSpace, TransitionSchema};
pub use par::Execution;
pub use ssa::{simulate_extinction_time, simulate_sde_exit, McEstimate, SdeConfig, SimConfig, Start};
