//! Run manifests: everything needed to reproduce a run, and nothing that
//! varies between identical runs (no timestamps, hosts or thread counts).

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, Seeds};
use crate::error::CliError;

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub file: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Ok(FileDigest {
            file: path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
            sha256: sha256_hex(&bytes),
        })
    }
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub config_sha256: String,
    pub config: &'a RunConfig,
    pub seeds: Seeds,
    /// Seed of the Brownian lattice shared by every row, where one exists.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lattice_seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Manifest<'_> {
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(self).expect("manifest serialises");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}
