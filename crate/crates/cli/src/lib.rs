//! Experiment front-end for the ringflow simulator: configuration files,
//! run manifests and the `train`, `eval`, `transfer`, `plotdata` and
//! `baseline` commands.

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod plotdata;
pub mod train;
pub mod transfer;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
