pub mod cli;
pub mod dataset;
pub mod diffusion;
pub mod env;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod value;

pub use error::{Error, Result};
