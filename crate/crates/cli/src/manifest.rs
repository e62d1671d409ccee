//! Run manifests written next to every output.
//!
//! A manifest is `key=value` text. Its configuration keys use the same
//! names as a config file, so passing a manifest back with `--config`
//! reruns the command with the same settings; the `input.`, `output.` and
//! `timing.` entries are ignored when read as configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, Default)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<(PathBuf, String)>,
    pub outputs: Vec<(PathBuf, String)>,
    pub timings: Vec<(String, Duration)>,
}

impl RunManifest {
    pub fn new(command: &str, config: BTreeMap<String, String>) -> Self {
        RunManifest {
            command: command.to_string(),
            config,
            ..Default::default()
        }
    }

    pub fn add_input(&mut self, path: &Path) -> CliResult<()> {
        let digest = sha256_file(path)?;
        self.inputs.push((path.to_path_buf(), digest));
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> CliResult<()> {
        let digest = sha256_file(path)?;
        self.outputs.push((path.to_path_buf(), digest));
        Ok(())
    }

    pub fn add_timing(&mut self, name: &str, d: Duration) {
        self.timings.push((name.to_string(), d));
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command={}", self.command);
        let _ = writeln!(s, "tool_version={TOOL_VERSION}");
        for (k, v) in &self.config {
            let _ = writeln!(s, "{k}={v}");
        }
        for (kind, list) in [("input", &self.inputs), ("output", &self.outputs)] {
            for (i, (p, d)) in list.iter().enumerate() {
                let _ = writeln!(s, "{kind}.{i}.path={}", p.display());
                let _ = writeln!(s, "{kind}.{i}.sha256={d}");
            }
        }
        for (name, d) in &self.timings {
            let _ = writeln!(s, "timing.{name}_ms={:.3}", d.as_secs_f64() * 1e3);
        }
        s
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.render()).map_err(|e| CliError::io(path, e))
    }
}

/// `<path>.manifest` beside a single output file.
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}
