//! Weight container files.

use std::path::Path;

use elpips_core::convnet::{generate_weights, ArchitectureId, WeightContainer};
use elpips_core::format;

use crate::error::{CliError, CliResult};

pub fn load_weights(path: &Path) -> CliResult<WeightContainer> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    format::decode(&bytes).map_err(|e| CliError::io(path, e))
}

pub fn save_weights(container: &WeightContainer, path: &Path) -> CliResult<()> {
    let bytes = format::encode(container).map_err(|e| CliError::io(path, e))?;
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Loads `path` when given, otherwise generates seeded weights for `arch`.
pub fn weights_or_generated(path: Option<&Path>, arch: ArchitectureId, seed: u64) -> CliResult<WeightContainer> {
    match path {
        Some(p) => load_weights(p),
        None => Ok(generate_weights(arch, seed)),
    }
}
