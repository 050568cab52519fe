use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

/// Bumped whenever a CSV layout changes.
pub const CSV_SCHEMA_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one command run. Every data file the run wrote is listed in
/// `outputs`, relative to the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub csv_schema: u32,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub outputs: Vec<String>,
    pub wall_clock_s: f64,
    /// Measurements that are not reproducible byte for byte, such as timings.
    pub metrics: serde_json::Value,
    /// Full effective config; `ridsim rerun` reads it back.
    pub config: serde_json::Value,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
