//! Stochastic flows of kernels: exact annealed computations, quenched
//! density simulation and reference values for the limiting stochastic heat
//! equation.

pub mod annealed;
pub mod diff_chain;
pub mod error;
pub mod harness;
pub mod kpoint;
pub mod model;
pub mod oracle;
pub mod phi;
pub mod quad;
pub mod quenched;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
pub use model::{EnvKey, ModelSpec, RowPMF};
pub use stats::Estimate;
