use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

impl Artifact {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self { path: path.to_path_buf(), sha256: sha256_file(path)? })
    }
}

/// Record of one command invocation, written next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub timings_ms: BTreeMap<String, u128>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings_ms: BTreeMap::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(deepj_core::Error::from)?;
        fs::write(&path, text + "\n").map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        Ok(serde_json::from_str(&text).map_err(deepj_core::Error::from)?)
    }

    /// Paths whose current contents no longer match the recorded hash.
    pub fn verify(&self) -> Result<Vec<PathBuf>> {
        let mut stale = Vec::new();
        for a in self.inputs.iter().chain(&self.outputs) {
            if !a.path.exists() || sha256_file(&a.path)? != a.sha256 {
                stale.push(a.path.clone());
            }
        }
        Ok(stale)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(format!("hashing {}", path.display()), e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(CliError::MissingInput(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))
}
