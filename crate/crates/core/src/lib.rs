//! Monte Carlo time-stepping solvers for scalar backward stochastic
//! differential equations
//!
//! ```text
//! Y_t = ξ + ∫_t^T f(r, Y_r, Z_r) dr - ∫_t^T Z_r dW_r
//! ```
//!
//! with an explicit scheme, an implicit scheme solved by Picard iteration,
//! and a fully discrete scheme that recovers `Z` through Malliavin weights.
//! The [`analysis`] module measures errors against closed-form solutions and
//! fits empirical convergence orders; [`cli`] wires everything into a
//! config-driven experiment runner.

pub mod analysis;
pub mod cli;
pub mod condexp;
pub mod error;
pub mod paths;
pub mod problems;
pub mod schemes;

pub use error::{BsdeError, Result};
