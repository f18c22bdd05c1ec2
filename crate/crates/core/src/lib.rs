//! Variational Monte Carlo for the three-dimensional homogeneous electron gas
//! with a message-passing neural backflow wavefunction, stochastic
//! reconfiguration and fixed-node diffusion Monte Carlo.

pub mod cell;
pub mod dmc;
pub mod error;
pub mod ewald;
pub mod linalg;
pub mod mpnn;
pub mod observables;
pub mod nn;
pub mod orbitals;
pub mod sampler;
pub mod sr;
pub mod stats;
pub mod vmc;
pub mod wavefunction;

pub use error::{Error, Result};
