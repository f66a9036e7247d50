pub mod bridges;
pub mod config;
pub mod csvio;
pub mod error;
pub mod experiment;
pub mod hamiltonian;
pub mod inference;
pub mod kernels;
pub mod linalg;
pub mod moments;
pub mod optim;
pub mod rng;
pub mod sde;
pub mod state;

pub use error::{Error, Result};
