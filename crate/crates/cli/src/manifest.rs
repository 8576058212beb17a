//! The reproducibility record written next to every output.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Serialize)]
pub struct InputChecksum {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    /// Every option after merging flags, config file and defaults.
    pub config: serde_json::Value,
    pub inputs: Vec<InputChecksum>,
    /// Output file names with their checksums.
    pub outputs: Vec<InputChecksum>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

pub fn now_unix() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn checksum(path: &Path) -> Result<InputChecksum, CliError> {
    Ok(InputChecksum {
        path: path.display().to_string(),
        sha256: sha256_file(path)?,
    })
}

impl RunManifest {
    /// Records checksums of `outputs` (relative to `dir`) and writes
    /// `manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path, outputs: &[&str]) -> Result<(), CliError> {
        self.outputs = outputs
            .iter()
            .map(|name| {
                Ok(InputChecksum {
                    path: (*name).to_string(),
                    sha256: sha256_file(&dir.join(name))?,
                })
            })
            .collect::<Result<_, CliError>>()?;
        self.finished_unix = now_unix();
        let value = serde_json::to_value(&self).map_err(|e| CliError::Data(e.to_string()))?;
        crate::io::write_json(&dir.join("manifest.json"), &value)
    }
}
