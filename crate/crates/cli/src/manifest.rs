//! Run manifests: a JSON record of what a subcommand did.
//!
//! Every subcommand writes exactly one `run_manifest.json` beside its
//! outputs, holding the resolved configuration, the input and output
//! paths, and a SHA-256 checksum of every written artifact, so identical
//! runs can be verified byte-for-byte.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
pub struct ArtifactChecksum {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<ArtifactChecksum>,
    pub seed: u64,
    pub wall_seconds: f64,
}

/// Collects a run's details as it goes, then writes the manifest once.
pub struct RunRecorder {
    subcommand: String,
    config: serde_json::Value,
    seed: u64,
    inputs: Vec<String>,
    outputs: Vec<PathBuf>,
}

impl RunRecorder {
    pub fn new(subcommand: &str, config: serde_json::Value, seed: u64) -> RunRecorder {
        RunRecorder {
            subcommand: subcommand.to_string(),
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    /// Registers a written artifact; its checksum is taken at finish time.
    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Checksums the registered outputs and writes `run_manifest.json`
    /// into `dir`, returning the manifest path. `wall` is the measured
    /// run duration, taken from before config resolution.
    pub fn finish(self, dir: &Path, wall: Duration) -> Result<PathBuf> {
        let outputs = self
            .outputs
            .iter()
            .map(|p| {
                Ok(ArtifactChecksum {
                    path: p.display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = RunManifest {
            subcommand: self.subcommand,
            config: self.config,
            inputs: self.inputs,
            outputs,
            seed: self.seed,
            wall_seconds: wall.as_secs_f64(),
        };
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        let path = dir.join(MANIFEST_NAME);
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("checksumming {}", path.display()))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
