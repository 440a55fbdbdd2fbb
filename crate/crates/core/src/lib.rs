//! Proximal-gradient stochastic variational inference.

pub mod baselines;
pub mod ctm;
pub mod divergences;
pub mod error;
pub mod harness;
pub mod estimators;
pub mod linalg;
pub mod models;
pub mod quadrature;
pub mod rng;
pub mod solver;

pub use error::{Error, Result};
