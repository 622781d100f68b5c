use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use effdeblur::efficiency::device_description;

pub const MANIFEST_NAME: &str = "manifest.json";

/// Provenance record written beside every command's artifacts. Two runs of
/// the same invocation differ only in `started_at` and `finished_at`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub version: String,
    pub device: String,
    pub outputs: Vec<String>,
    pub started_at: String,
    pub finished_at: String,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn start(command: &str, config: serde_json::Value, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            device: device_description(),
            outputs: Vec::new(),
            started_at: now(),
            finished_at: String::new(),
        }
    }

    /// Stamps the finish time and sorts outputs so listings are stable.
    pub fn finish(mut self, mut outputs: Vec<String>) -> Self {
        outputs.sort();
        self.outputs = outputs;
        self.finished_at = now();
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Copy with timestamps blanked, for comparing runs.
    pub fn without_timestamps(&self) -> Self {
        Self {
            started_at: String::new(),
            finished_at: String::new(),
            ..self.clone()
        }
    }
}

/// Manifest location for a single-file artifact: `<file>.manifest.json`.
pub fn sibling_manifest(file: &Path) -> PathBuf {
    let mut name = file
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".manifest.json");
    file.with_file_name(name)
}
