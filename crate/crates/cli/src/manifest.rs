//! Run manifests and output-directory locks.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_FORMAT: &str = "fairwell-manifest/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

/// What ran, on which inputs, producing which files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_format: String,
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub seed: Option<u64>,
    /// Fully resolved configuration, defaults included.
    pub config: Value,
    /// Input path to hex SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    /// Artifact name to path.
    pub artifacts: BTreeMap<String, String>,
    pub status: RunStatus,
    pub error: Option<String>,
    pub started_unix_ms: u64,
    pub wall_clock_secs: Option<f64>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0);
        Self {
            manifest_format: MANIFEST_FORMAT.into(),
            command: command.into(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: None,
            config: Value::Null,
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            status: RunStatus::Running,
            error: None,
            started_unix_ms: started,
            wall_clock_secs: None,
        }
    }

    pub fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        self.inputs.insert(path.display().to_string(), file_sha256(path)?);
        Ok(())
    }

    pub fn artifact(&mut self, name: &str, path: &Path) {
        self.artifacts.insert(name.into(), path.display().to_string());
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Writes the manifest before `body` runs and again after, recording the
/// outcome either way.
pub fn with_manifest<T>(
    path: &Path,
    mut manifest: RunManifest,
    body: impl FnOnce(&mut RunManifest) -> anyhow::Result<T>,
) -> anyhow::Result<T> {
    let clock = Instant::now();
    write_json(path, &manifest)?;
    let out = body(&mut manifest);
    manifest.wall_clock_secs = Some(clock.elapsed().as_secs_f64());
    match &out {
        Ok(_) => manifest.status = RunStatus::Complete,
        Err(e) => {
            manifest.status = RunStatus::Failed;
            manifest.error = Some(format!("{e:#}"));
        }
    }
    write_json(path, &manifest)?;
    out
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn file_sha256(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Exclusive claim on an output location, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(path: PathBuf) -> anyhow::Result<Self> {
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::Locked(path.display().to_string()).into())
            }
            Err(e) => Err(anyhow::Error::new(e).context(format!("creating lock {}", path.display()))),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
