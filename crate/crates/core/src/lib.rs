//! Uncertainty-guided part/whole alignment in the Lorentz model of hyperbolic
//! space, with a small trainer over synthetic data.

pub mod entailment;
pub mod cli;
pub mod config;
pub mod error;
pub mod evalmetrics;
pub mod gradcheck;
pub mod gradients;
pub mod losses;
pub mod manifold;
pub mod model;
pub mod scalar;
pub mod synthdata;
pub mod tape;
pub mod trainer;
pub mod uncertainty;

pub use error::{Error, Result};
