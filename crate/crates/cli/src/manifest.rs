//! Run manifests: resolved config plus content hashes of the inputs, enough
//! to reproduce a run byte-identically.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::KeyValues;

#[derive(Serialize)]
pub struct Manifest {
    command: String,
    config: BTreeMap<String, String>,
    input_sha256: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, kv: &KeyValues) -> Manifest {
        Manifest {
            command: command.to_string(),
            config: kv.entries().clone(),
            input_sha256: BTreeMap::new(),
        }
    }

    pub fn with_input(mut self, path: &Path) -> Result<Manifest> {
        let bytes = std::fs::read(path)
            .with_context(|| format!("hashing input {}", path.display()))?;
        let digest = Sha256::digest(&bytes);
        self.input_sha256
            .insert(path.display().to_string(), format!("{digest:x}"));
        Ok(self)
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
