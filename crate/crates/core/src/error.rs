use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    /// Two particles sit on top of each other; the Coulomb energy diverges.
    #[error("coincident particles {0} and {1}")]
    Divergence(usize, usize),
    /// The orbital matrix is numerically singular. Samplers treat this as a
    /// rejected move rather than a hard failure.
    #[error("singular orbital matrix (log|pivot| = {0})")]
    Singular(f64),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;
