//! Per-run record of the configuration and output digests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const FILE: &str = "manifest.toml";

#[derive(Serialize, Debug)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seeds: Vec<u64>,
    pub arch_digest: String,
    pub data: String,
    /// Effective configuration after flag overrides.
    pub config: String,
    /// SHA-256 of every output, keyed by path relative to the run directory.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, config: &fbnn::config::RunConfig) -> Self {
        Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seeds: config.scenario.seeds.clone(),
            arch_digest: String::new(),
            data: String::new(),
            config: config.to_toml(),
            outputs: BTreeMap::new(),
        }
    }

    /// Hashes `files` (relative to `dir`) and writes the manifest there.
    pub fn write(mut self, dir: &Path, files: &[PathBuf]) -> Result<()> {
        for f in files {
            let bytes = std::fs::read(dir.join(f)).with_context(|| format!("reading {}", f.display()))?;
            self.outputs
                .insert(f.to_string_lossy().into_owned(), hex::encode(Sha256::digest(&bytes)));
        }
        let text = toml::to_string(&self).context("serializing manifest")?;
        std::fs::write(dir.join(FILE), text).context("writing manifest")?;
        Ok(())
    }
}
