//! Sequential MCMC filtering with invertible particle-flow proposals.
//!
//! The crate bundles the benchmark state-space models, the particle-flow
//! machinery (EDH/LEDH), classical baselines (KF/EKF/UKF, bootstrap PF, PF-PF),
//! the composite-kernel SMCMC engine with its Gaussian-mixture extension,
//! evidence estimation and an experiment harness.

pub mod error;
pub mod evidence;
pub mod filters;
pub mod flow;
pub mod harness;
pub mod linalg;
pub mod mhmc;
pub mod model;
pub mod rng;
pub mod smcmc;
pub mod special;

pub use error::{Error, Result};
