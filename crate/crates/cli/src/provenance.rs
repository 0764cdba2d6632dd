//! Provenance records: what a command was run with and what it produced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use docsynth::io::{sha256_hex, write_atomic};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliResult;

pub const PROVENANCE_DIR: &str = "provenance";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Fully resolved configuration (file values with flags applied).
    pub config: RunConfig,
    /// Command-specific arguments that are not part of the config.
    pub arguments: BTreeMap<String, String>,
    /// SHA-256 of every input artifact.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every output artifact.
    pub outputs: BTreeMap<String, String>,
}

impl Provenance {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: config.clone(),
            arguments: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn argument(mut self, key: &str, value: impl ToString) -> Self {
        self.arguments.insert(key.to_string(), value.to_string());
        self
    }

    pub fn input(mut self, key: &str, sha256: impl Into<String>) -> Self {
        self.inputs.insert(key.to_string(), sha256.into());
        self
    }

    pub fn output(mut self, key: &str, sha256: impl Into<String>) -> Self {
        self.outputs.insert(key.to_string(), sha256.into());
        self
    }

    pub fn path(run_dir: &Path, command: &str) -> PathBuf {
        run_dir.join(PROVENANCE_DIR).join(format!("{command}.json"))
    }

    /// Writes the record and returns its SHA-256.
    pub fn write(&self, run_dir: &Path) -> CliResult<String> {
        let path = Self::path(run_dir, &self.command);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut json = serde_json::to_string_pretty(self).expect("provenance serializes");
        json.push('\n');
        write_atomic(&path, json.as_bytes())?;
        Ok(sha256_hex(json.as_bytes()))
    }
}
