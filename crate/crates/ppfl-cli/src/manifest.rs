//! Run manifests: the resolved configuration, content hashes of every
//! input CSV, and the artifact list, so a run's outputs are reproducible
//! bit for bit from the manifest alone.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub workers: usize,
    /// Fully resolved configuration (file + flag overrides applied).
    pub config: BTreeMap<String, String>,
    /// SHA-256 per input data file.
    pub data_fingerprints: BTreeMap<String, String>,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, workers: usize, config: BTreeMap<String, String>) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            workers,
            config,
            data_fingerprints: BTreeMap::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn fingerprint_file(&mut self, path: &Path) -> Result<()> {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .map(str::to_string)
            .unwrap_or_else(|| path.display().to_string());
        self.data_fingerprints.insert(name, sha256_file(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)?;
        fs::write(path, body).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file =
        fs::File::open(path).with_context(|| format!("hashing {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprints_are_stable_and_content_sensitive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        fs::write(&path, "a,b\n1,2\n").unwrap();
        let a = sha256_file(&path).unwrap();
        let b = sha256_file(&path).unwrap();
        assert_eq!(a, b);
        fs::write(&path, "a,b\n1,3\n").unwrap();
        assert_ne!(a, sha256_file(&path).unwrap());
    }

    #[test]
    fn manifest_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = BTreeMap::new();
        config.insert("mode".to_string(), "ppfl".to_string());
        let mut manifest = RunManifest::new("train", 7, 2, config);
        manifest.artifacts.push("metrics.csv".to_string());
        let path = dir.path().join("manifest.json");
        manifest.write(&path).unwrap();
        let back: RunManifest =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(back.seed, 7);
        assert_eq!(back.config["mode"], "ppfl");
        assert_eq!(back.artifacts, vec!["metrics.csv"]);
    }
}
