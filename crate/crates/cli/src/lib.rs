//! Command-line surface, image IO, weight files and run manifests for the
//! ensembled perceptual image distance.

pub mod commands;
pub mod config;
pub mod error;
pub mod fixture;
pub mod imageio;
pub mod manifest;
pub mod parallel;
pub mod weights;

pub use commands::run;
pub use error::{CliError, CliResult};
