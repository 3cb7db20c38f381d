//! Sidecar describing how an output was produced.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;
use sha2::{Digest, Sha256};

use mfgsim::{Config, Result, TimeGrid};

#[derive(Debug, Serialize)]
pub struct OutputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub config_sha256: String,
    pub seed: u64,
    pub command: String,
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub version: String,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<OutputDigest>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunManifest {
    pub fn new(cfg: &Config, command: &str, n_paths: usize, elapsed: Duration, outputs: &[PathBuf]) -> Result<Self> {
        let outputs = outputs
            .iter()
            .map(|p| {
                Ok(OutputDigest { path: p.display().to_string(), sha256: sha256_hex(&std::fs::read(p)?) })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config_sha256: sha256_hex(cfg.to_json().as_bytes()),
            seed: cfg.seed,
            command: command.to_string(),
            grid: cfg.grid.clone(),
            n_paths,
            version: env!("CARGO_PKG_VERSION").to_string(),
            wall_clock_seconds: elapsed.as_secs_f64(),
            outputs,
        })
    }

    /// Writes `<output>.manifest.json`.
    pub fn write_beside(&self, output: &Path) -> Result<()> {
        let mut name = output.as_os_str().to_owned();
        name.push(".manifest.json");
        std::fs::write(PathBuf::from(name), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
