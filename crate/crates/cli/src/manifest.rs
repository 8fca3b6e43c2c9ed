//! Run manifest: configuration hash and content hashes of every file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Command;
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl FileEntry {
    pub fn of(path: &Path, label: String) -> Result<Self, CliError> {
        let data = std::fs::read(path)?;
        Ok(Self { path: label, sha256: sha256_hex(&data), bytes: data.len() as u64 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: Command,
    pub version: String,
    pub seed: u64,
    pub chains: usize,
    pub config_sha256: String,
    /// Canonical configuration after command-line overrides.
    pub config: String,
    pub notes: Vec<String>,
    pub inputs: Vec<FileEntry>,
    /// Paths relative to the output directory.
    pub outputs: Vec<FileEntry>,
}

pub fn sha256_hex(data: &[u8]) -> String {
    Sha256::digest(data).iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        serde_json::from_str(&text).map_err(|e| CliError::Core(e.into()))
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Core(e.into()))?;
        std::fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    /// Outputs whose current content differs from the recorded hash.
    pub fn verify(&self, dir: &Path) -> Vec<String> {
        self.outputs
            .iter()
            .filter_map(|f| match FileEntry::of(&dir.join(&f.path), f.path.clone()) {
                Ok(now) if now == *f => None,
                Ok(_) => Some(format!("{}: content changed", f.path)),
                Err(e) => Some(format!("{}: {e}", f.path)),
            })
            .collect()
    }
}
