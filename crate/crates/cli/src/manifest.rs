//! Run manifests written beside every produced artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full argument list; re-running it reproduces the outputs.
    pub args: Vec<String>,
    pub config: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub started_at: String,
    /// SHA-256 of every input and output file.
    pub artifact_hashes: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// `<file>.manifest.json`
pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}

impl RunManifest {
    pub fn new(command: &str, args: &[String], started_at: String) -> Self {
        Self {
            command: command.to_owned(),
            args: args.to_vec(),
            config: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            seed: None,
            started_at,
            artifact_hashes: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.to_owned(), path.display().to_string());
    }

    pub fn output(&mut self, name: &str, path: &Path) {
        self.outputs.insert(name.to_owned(), path.display().to_string());
    }

    /// Hash all files and write one manifest per output.
    pub fn finish(mut self) -> Result<()> {
        for p in self.inputs.values().chain(self.outputs.values()) {
            let h = sha256_file(Path::new(p))?;
            self.artifact_hashes.insert(p.clone(), h);
        }
        let json = serde_json::to_vec_pretty(&self)?;
        for p in self.outputs.values() {
            adsorbtext::write_atomic(&manifest_path(Path::new(p)), &json)?;
        }
        Ok(())
    }
}
