//! Run records written next to every artifact.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use fairsite::Result;
use serde::{Deserialize, Serialize};

/// Provenance of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub argv: Vec<String>,
    /// The fully resolved configuration the command ran with.
    pub config: serde_json::Value,
    pub seed: u64,
    pub version: String,
    pub deterministic: bool,
    pub threads: usize,
    /// Seconds since the Unix epoch.
    pub started_at: f64,
    pub finished_at: f64,
    pub outputs: Vec<PathBuf>,
}

pub fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Version string: `git describe` output captured at build time when
/// available, otherwise the package version.
pub fn version() -> String {
    option_env!("FAIRSITE_GIT_DESCRIBE")
        .map(str::to_owned)
        .unwrap_or_else(|| format!("fairsite {}", env!("CARGO_PKG_VERSION")))
}

/// `<path>.<suffix>` next to an artifact.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

impl RunRecord {
    pub fn write(&self, primary: &Path) -> Result<PathBuf> {
        let path = sidecar(primary, "run.json");
        write_json(&path, self)?;
        Ok(path)
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
