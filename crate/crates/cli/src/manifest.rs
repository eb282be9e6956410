//! Per-run provenance record, written to the output directory before
//! any other artifact.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command_line: Vec<String>,
    pub seed: u64,
    pub config: serde_json::Value,
    pub checkpoint: Option<String>,
    /// SHA-256 of every input file, keyed by path as given.
    pub dataset_fingerprints: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(seed: u64, config: serde_json::Value) -> RunManifest {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command_line: std::env::args().collect(),
            seed,
            config,
            checkpoint: None,
            dataset_fingerprints: BTreeMap::new(),
        }
    }

    pub fn fingerprint(&mut self, path: &Path) -> Result<()> {
        let digest = sha256_file(path)?;
        self.dataset_fingerprints
            .insert(path.display().to_string(), digest);
        Ok(())
    }

    /// Writes `manifest.json`; must be called before any output file.
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let path = out_dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path)
        .with_context(|| format!("fingerprinting {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}
