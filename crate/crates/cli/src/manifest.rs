//! Run directories and their manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, RunConfig};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to re-execute a run and check its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub code_version: String,
    pub config: RunConfig,
    pub config_hash: String,
    pub started: String,
    pub finished: String,
    /// Artifact name to SHA-256 of its deterministic content.
    pub artifacts: BTreeMap<String, String>,
    /// Hash over `artifacts`; equal for runs with equal (config, seed).
    pub content_hash: String,
}

/// Collects artifact hashes while a command runs.
pub struct RunRecorder {
    command: String,
    config: RunConfig,
    started: String,
    artifacts: BTreeMap<String, String>,
}

impl RunRecorder {
    pub fn start(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            config: config.clone(),
            started: now(),
            artifacts: BTreeMap::new(),
        }
    }

    /// Records a file whose bytes are fully deterministic.
    pub fn file(&mut self, dir: &Path, name: &str) -> Result<()> {
        let bytes = std::fs::read(dir.join(name)).with_context(|| format!("hashing artifact {name}"))?;
        self.artifacts.insert(name.to_string(), hex(&Sha256::digest(&bytes)));
        Ok(())
    }

    /// Records an artifact by a caller-supplied content hash (for files that
    /// also carry wall-clock timings).
    pub fn hashed(&mut self, name: &str, hash: String) {
        self.artifacts.insert(name.to_string(), hash);
    }

    pub fn finish(self, dir: &Path) -> Result<Manifest> {
        let mut h = Sha256::new();
        for (k, v) in &self.artifacts {
            h.update(k.as_bytes());
            h.update([0]);
            h.update(v.as_bytes());
            h.update([0]);
        }
        let m = Manifest {
            command: self.command,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: self.config.hash(),
            config: self.config,
            started: self.started,
            finished: now(),
            artifacts: self.artifacts,
            content_hash: hex(&h.finalize()),
        };
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&m)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(m)
    }
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

/// Creates `dir` for a new run. An existing non-empty directory is an error
/// unless `force` is set, in which case it is cleared.
pub fn prepare_run_dir(dir: &Path, force: bool) -> Result<PathBuf> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if non_empty {
            if !force {
                bail!(
                    "run directory {} already exists; pass --force to overwrite it",
                    dir.display()
                );
            }
            std::fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir.to_path_buf())
}
