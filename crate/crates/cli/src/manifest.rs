use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use mcsched::presets::ScenarioPreset;
use mcsched::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct OutputEntry {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

/// Provenance of one command run: what was run, with which configuration,
/// and what it wrote.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub preset: String,
    pub seed: u64,
    /// SHA-256 of the effective configuration (compact JSON).
    pub config_hash: String,
    pub config: ScenarioPreset,
    pub outputs: Vec<OutputEntry>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub version: &'static str,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn config_hash(preset: &ScenarioPreset) -> Result<String> {
    Ok(sha256_hex(serde_json::to_string(preset)?.as_bytes()))
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Collects the files a command writes into its output directory.
pub struct OutputDir {
    root: PathBuf,
    written: Vec<PathBuf>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf(), written: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Creates `name` (relative) and hands the file to `write`.
    pub fn write_with<F>(&mut self, name: &str, write: F) -> Result<PathBuf>
    where
        F: FnOnce(fs::File) -> Result<()>,
    {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        write(fs::File::create(&path)?)?;
        self.written.push(PathBuf::from(name));
        Ok(path)
    }

    /// Registers a file that was written by other means.
    pub fn record(&mut self, name: &str) {
        self.written.push(PathBuf::from(name));
    }

    pub fn finish(self, command: &str, preset: &ScenarioPreset, started_unix: u64) -> Result<PathBuf> {
        let mut outputs = Vec::new();
        for rel in &self.written {
            let bytes = fs::read(self.root.join(rel))?;
            outputs.push(OutputEntry { path: rel.to_string_lossy().replace('\\', "/"), sha256: sha256_hex(&bytes) });
        }
        let manifest = RunManifest {
            command: command.to_string(),
            preset: preset.name.clone(),
            seed: preset.train.env.seed,
            config_hash: config_hash(preset)?,
            config: preset.clone(),
            outputs,
            started_unix,
            finished_unix: unix_now(),
            version: env!("CARGO_PKG_VERSION"),
        };
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(path)
    }
}
