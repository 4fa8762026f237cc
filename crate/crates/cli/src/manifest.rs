use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::commands::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Serialize)]
pub struct ConfigSource {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Artifact {
    pub path: PathBuf,
    /// SHA-256 of the file contents.
    pub id: String,
    pub bytes: usize,
}

/// Record of one command invocation and everything it wrote.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: Option<ConfigSource>,
    pub effective_config: serde_json::Value,
    pub artifacts: Vec<Artifact>,
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
    pub wall_clock_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit_wall_clock_s: Option<f64>,
    #[serde(skip)]
    clock: Option<Instant>,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

impl RunManifest {
    pub fn start(command: &str, config: Option<ConfigSource>, effective: &impl Serialize) -> Self {
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config,
            effective_config: serde_json::to_value(effective).expect("configs serialize"),
            artifacts: Vec::new(),
            started_unix_s: unix_now(),
            finished_unix_s: 0.0,
            wall_clock_s: 0.0,
            fit_wall_clock_s: None,
            clock: Some(Instant::now()),
        }
    }

    /// Write `bytes` to `path` (creating parent directories) and list it.
    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        write_file(path, bytes)?;
        self.artifacts.push(Artifact { path: path.to_path_buf(), id: sha256_hex(bytes), bytes: bytes.len() });
        Ok(())
    }

    /// Stamp the end time and write the manifest to `path`.
    pub fn finish(mut self, path: &Path) -> Result<(), CliError> {
        self.finished_unix_s = unix_now();
        self.wall_clock_s = self.clock.map_or(0.0, |c| c.elapsed().as_secs_f64());
        let json = serde_json::to_string_pretty(&self).expect("manifest serializes");
        write_file(path, json.as_bytes())
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// `<file>.manifest.json` next to the primary artifact.
pub fn manifest_path(primary: &Path) -> PathBuf {
    let mut name = primary.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    primary.with_file_name(name)
}
