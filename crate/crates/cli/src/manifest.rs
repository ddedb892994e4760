//! Run manifests: the effective configuration plus content hashes of every input.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

#[derive(Debug, Serialize)]
pub struct InputHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<InputHash>,
    /// Hash over the input hashes, in order.
    pub input_hash: String,
    pub outputs: Vec<PathBuf>,
}

/// Git-style blob hash (`blob <len>\0<bytes>`) with SHA-256.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    format!("{:x}", h.finalize())
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig, inputs: &[&Path]) -> Result<Self> {
        let mut hashes = Vec::new();
        for p in inputs {
            let bytes = std::fs::read(p).with_context(|| format!("hashing {}", p.display()))?;
            hashes.push(InputHash {
                path: p.to_path_buf(),
                sha256: blob_hash(&bytes),
            });
        }
        let mut all = Sha256::new();
        for h in &hashes {
            all.update(h.sha256.as_bytes());
        }
        Ok(Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            config: config.clone(),
            inputs: hashes,
            input_hash: format!("{:x}", all.finalize()),
            outputs: Vec::new(),
        })
    }

    /// Writes `<out_dir>/<command>.manifest.json`.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join(format!("{}.manifest.json", self.command));
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
