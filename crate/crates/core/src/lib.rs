pub mod dynamics;
pub mod error;
pub mod highway_env;
pub mod mlp;
pub mod perturbation;
pub mod policy;
pub mod ring_env;
pub mod rng;
pub mod trpo;

pub use error::{Error, Result};
