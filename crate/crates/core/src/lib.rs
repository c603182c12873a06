//! Optimal rerandomization designs: threshold search over a ranked pool of
//! forced-balance assignments, tail criteria for the estimator MSE,
//! randomization inference and a simulation harness.

pub mod artifact;
pub mod balance;
pub mod covariates;
pub mod design_space;
pub mod distributions;
pub mod error;
pub mod inference;
pub mod moments;
pub mod optimizer;
pub mod parallel;
pub mod rng;
pub mod sim;
pub mod smoothing;
pub mod tail;

pub use error::{Error, Result};
