pub mod dsa;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod error;
pub mod experiment;
pub mod latent;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod optim;
pub mod scoring;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
