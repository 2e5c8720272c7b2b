use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("derivative order {0} exceeds kernel smoothness (max 2 per argument)")]
    UnsupportedOrder(usize),
    #[error("kernel evaluation failed: {0}")]
    KernelEvaluation(String),
    #[error("information functionals are numerically singular: {0}")]
    SingularInformation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("integrator step size underflow at t = {0}")]
    Stiffness(f64),
    #[error("value outside domain: {0}")]
    Domain(String),
    #[error("selector {0} refers to an excluded node")]
    InvalidSelector(usize),
    #[error("location {0} is outside the solution grid")]
    Interpolation(f64),
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
