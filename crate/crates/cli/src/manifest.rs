use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::settings::Settings;

/// Record written beside every run's outputs. It holds no timestamps, so a
/// re-run from the same manifest reproduces it byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub versions: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, settings: &Settings, outputs: &[&Path]) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("trajflow".to_string(), trajflow::VERSION.to_string());
        versions.insert("trajflow-cli".to_string(), env!("CARGO_PKG_VERSION").to_string());
        Manifest {
            command: command.to_string(),
            config: settings.entries().clone(),
            config_hash: settings.hash(),
            seed: settings.get("seed").and_then(|s| s.parse().ok()),
            versions,
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").with_context(|| format!("writing manifest {}", path.display()))
    }
}

/// `<file>.manifest.json` beside a single output file.
pub fn beside(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
