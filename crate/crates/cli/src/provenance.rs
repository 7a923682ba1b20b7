//! `provenance.toml`: one table per command that wrote into the directory,
//! holding the tool version, the config snapshot and SHA-256 of every input.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::config::RunConfig;
use crate::CliError;

pub const FILE: &str = "provenance.toml";

#[derive(Debug, Default)]
pub struct Inputs {
    hashes: BTreeMap<String, String>,
}

impl Inputs {
    /// Hashes the file at `path`.
    pub fn add(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = std::fs::read(path).map_err(|e| io(path, e))?;
        self.hashes.insert(path.display().to_string(), format!("{:x}", Sha256::digest(&bytes)));
        Ok(())
    }

    /// Hashes a map written with `write_scaled_map` and its sidecar.
    pub fn add_scaled(&mut self, path: &Path) -> Result<(), CliError> {
        self.add(path)?;
        self.add(&path.with_extension("toml"))
    }

    #[cfg(test)]
    pub fn len(&self) -> usize {
        self.hashes.len()
    }
}

pub fn io(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(octden::Error::Io {
        path: PathBuf::from(path),
        source,
    })
}

/// Adds or replaces the `command` entry of `dir/provenance.toml`.
pub fn record(dir: &Path, command: &str, cfg: &RunConfig, inputs: &Inputs) -> Result<(), CliError> {
    let path = dir.join(FILE);
    let mut doc = match std::fs::read_to_string(&path) {
        Ok(text) => text
            .parse::<Table>()
            .map_err(|e| CliError::config(&path.display().to_string(), e.message().to_string()))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Table::new(),
        Err(e) => return Err(io(&path, e)),
    };
    let mut entry = Table::new();
    entry.insert("tool".into(), Value::String(env!("CARGO_PKG_NAME").into()));
    entry.insert("version".into(), Value::String(env!("CARGO_PKG_VERSION").into()));
    entry.insert("config".into(), cfg.to_toml());
    let hashes: Table = inputs
        .hashes
        .iter()
        .map(|(k, v)| (k.clone(), Value::String(v.clone())))
        .collect();
    entry.insert("inputs".into(), Value::Table(hashes));
    doc.insert(command.to_string(), Value::Table(entry));
    let text = toml::to_string(&doc).expect("provenance serializes");
    std::fs::write(&path, text).map_err(|e| io(&path, e))
}
