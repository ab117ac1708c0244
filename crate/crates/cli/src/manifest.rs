//! Run manifests: resolved configuration, seeds and content hashes of inputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

#[derive(Debug, Serialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub threads: usize,
    /// SHA-256 over every input's path and content hash, in path order.
    pub inputs_hash: String,
    /// Seeds drawn from the master seed.
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<InputFile>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<RunConfig>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn new(command: &str, inputs: &[PathBuf], config: Option<RunConfig>) -> Result<Self, CliError> {
        let mut files = inputs
            .iter()
            .map(|p| {
                Ok(InputFile {
                    path: p.display().to_string(),
                    sha256: file_sha256(p)?,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        files.sort_by(|a, b| a.path.cmp(&b.path));
        let mut h = Sha256::new();
        for f in &files {
            h.update(f.path.as_bytes());
            h.update([0]);
            h.update(f.sha256.as_bytes());
            h.update([b'\n']);
        }
        Ok(Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            threads: rayon::current_num_threads(),
            inputs_hash: hex(&h.finalize()),
            seeds: BTreeMap::new(),
            inputs: files,
            config,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = toml::to_string(self).map_err(|e| CliError::other(format!("manifest: {e}")))?;
        std::fs::write(path, text).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
    }
}
