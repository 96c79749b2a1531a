use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Written once into every output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Settings the command actually ran with.
    pub config: serde_json::Value,
    pub input_hashes: BTreeMap<String, String>,
    /// Hashes of what this run produced, e.g. `dataset` or `checkpoint`.
    pub output_hashes: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, seed: Option<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            seed,
            config: serde_json::Value::Null,
            input_hashes: BTreeMap::new(),
            output_hashes: BTreeMap::new(),
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_clock_seconds: 0.0,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Runtime(e.to_string()))?;
        fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("bad manifest {}: {e}", path.display())))
    }

    /// Fails unless this run's recorded `key` hash equals `expected`.
    pub fn require_input(&self, key: &str, expected: &str) -> Result<(), CliError> {
        match self.input_hashes.get(key) {
            Some(h) if h == expected => Ok(()),
            Some(h) => Err(CliError::Lineage(format!("{key} hash {h} does not match {expected}"))),
            None => Err(CliError::Lineage(format!("manifest records no {key} hash"))),
        }
    }
}
