//! Probabilistic forward and adjoint sensitivity analysis with Gaussian processes,
//! and a gradient-descent optimizer driven by the resulting gradient posteriors.

pub mod analysis;
pub mod error;
pub mod experiment;
pub mod gp;
pub mod kernels;
pub mod linalg;
pub mod fhn;
pub mod gwf;
pub mod ode;
pub mod optim;
pub mod sensitivity;

pub use error::{Error, Result};
