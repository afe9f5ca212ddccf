//! Run manifests, configuration hashing and the per-directory lock.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::formats::write_file;

pub const LOCK_FILE: &str = "calm.lock";
pub const MANIFEST_FILE: &str = "manifest.json";

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of the configuration as JSON with keys sorted at every level.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let value = serde_json::to_value(cfg).expect("config serializes");
    hex(&Sha256::digest(value.to_string().as_bytes()))
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub code_version: String,
    pub started: f64,
    pub finished: Option<f64>,
    pub artifacts: Vec<PathBuf>,
}

impl RunManifest {
    pub fn start(command: &str, cfg: &ExperimentConfig) -> Self {
        RunManifest {
            command: command.into(),
            config_hash: config_hash(cfg),
            code_version: env!("CARGO_PKG_VERSION").into(),
            started: unix_now(),
            finished: None,
            artifacts: Vec::new(),
        }
    }

    pub fn add(&mut self, path: &Path) {
        self.artifacts.push(path.to_path_buf());
    }

    pub fn finish(&mut self, dir: &Path) -> Result<(), CliError> {
        self.finished = Some(unix_now());
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_file(
            &dir.join(format!("{}.{MANIFEST_FILE}", self.command)),
            text.as_bytes(),
        )
    }
}

/// Exclusive claim on an experiment directory, released on drop.
#[derive(Debug)]
pub struct ExperimentLock {
    path: PathBuf,
}

impl ExperimentLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(ExperimentLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::Config(format!(
                    "experiment directory {} is locked by another process ({} exists)",
                    dir.display(),
                    path.display()
                )))
            }
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

impl Drop for ExperimentLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
