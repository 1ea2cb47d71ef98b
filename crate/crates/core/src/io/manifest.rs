//! Run manifest: the effective config's hash, the master seed, and a
//! digest of every artifact the pipeline wrote. Two runs of the same
//! config produce byte-identical manifests, which makes the file a cheap
//! whole-run determinism check.

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactDigest {
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    /// SHA-256 of the effective config's canonical TOML form.
    pub config_sha256: String,
    pub master_seed: u64,
    /// Artifact file name → content digest, sorted by name.
    pub artifacts: BTreeMap<String, ArtifactDigest>,
}

impl Manifest {
    pub fn new(config: &ExperimentConfig) -> Self {
        Manifest {
            config_sha256: sha256_hex(config.canonical_toml().as_bytes()),
            master_seed: config.experiment.master_seed,
            artifacts: BTreeMap::new(),
        }
    }

    /// Digest `path` and file it under the artifact's bare file name.
    pub fn record_artifact(&mut self, path: &Path) -> Result<()> {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| {
                Error::validation(format!(
                    "artifact path {} has no usable file name",
                    path.display()
                ))
            })?
            .to_string();
        self.artifacts.insert(name, digest_file(path)?);
        Ok(())
    }

    /// Check that this manifest was produced by `config`.
    pub fn matches_config(&self, config: &ExperimentConfig) -> bool {
        self.config_sha256 == sha256_hex(config.canonical_toml().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

pub fn digest_file(path: &Path) -> Result<ArtifactDigest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(super::display(path), e))?;
    Ok(ArtifactDigest {
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
    })
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let mut writer = super::create(path)?;
    serde_json::to_writer_pretty(&mut writer, manifest)?;
    writer
        .write_all(b"\n")
        .and_then(|()| writer.flush())
        .map_err(|e| Error::io(super::display(path), e))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = super::read_file(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::format(super::display(path), e.to_string()))
}
