//! `manifest.json`, written next to every command's outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub toolkit_version: String,
    pub seed: Option<u64>,
    /// Effective configuration after defaults and seed derivation.
    pub config: serde_json::Value,
    /// Input path -> sha256.
    pub inputs: BTreeMap<String, String>,
    /// Output path relative to the output directory -> sha256.
    pub outputs: BTreeMap<String, String>,
    pub wall_clock_s: f64,
    /// Command-specific results.
    pub summary: serde_json::Value,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Collects inputs and outputs while a command runs.
pub struct ManifestBuilder {
    command: String,
    seed: Option<u64>,
    config: serde_json::Value,
    out_dir: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
    summary: serde_json::Map<String, serde_json::Value>,
    start: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, out_dir: &Path) -> Self {
        Self {
            command: command.to_string(),
            seed: None,
            config: serde_json::Value::Null,
            out_dir: out_dir.to_path_buf(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            summary: serde_json::Map::new(),
            start: Instant::now(),
        }
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.seed = Some(seed);
        self
    }

    pub fn config(&mut self, config: &impl Serialize) -> &mut Self {
        self.config = serde_json::to_value(config).expect("config serializes");
        self
    }

    pub fn input(&mut self, path: &Path) -> Result<&mut Self, CliError> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(self)
    }

    /// Records an output file (and its `.json` sidecar when present).
    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.to_path_buf());
        let side = canopy_core::raster::sidecar_path(path);
        if side.exists() {
            self.outputs.push(side);
        }
        self
    }

    pub fn summary(&mut self, key: &str, value: impl Serialize) -> &mut Self {
        self.summary
            .insert(key.to_string(), serde_json::to_value(value).expect("summary serializes"));
        self
    }

    pub fn write(self) -> Result<RunManifest, CliError> {
        let mut outputs = BTreeMap::new();
        for p in &self.outputs {
            let rel = p.strip_prefix(&self.out_dir).unwrap_or(p);
            outputs.insert(rel.display().to_string(), sha256_file(p)?);
        }
        let m = RunManifest {
            command: self.command,
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            config: self.config,
            inputs: self.inputs,
            outputs,
            wall_clock_s: self.start.elapsed().as_secs_f64(),
            summary: serde_json::Value::Object(self.summary),
        };
        let path = self.out_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(m)
    }
}
