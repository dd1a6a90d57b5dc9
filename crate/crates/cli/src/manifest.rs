use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one invocation, written to the run directory before any work
/// starts and rewritten when the run ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command_line: Vec<String>,
    pub subcommand: String,
    pub config_path: Option<PathBuf>,
    /// Raw text of the config file, if one was given.
    pub config_contents: Option<String>,
    /// Config after flag overrides, as TOML. Passing this back via
    /// `--config` with the same subcommand and inputs replays the run.
    pub resolved_config: String,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub artifacts: Vec<PathBuf>,
    pub tool_version: String,
    pub started: String,
    pub finished: Option<String>,
    pub status: Option<String>,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Creates `<root>/<timestamp>-seed<seed>`, adding a counter if that name is
/// taken.
pub fn create_run_dir(root: &Path, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(root).with_context(|| format!("creating output root {}", root.display()))?;
    let stamp = Utc::now().format("%Y%m%dT%H%M%S%3fZ");
    let base = format!("{stamp}-seed{seed}");
    for n in 0.. {
        let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating run directory {}", dir.display())),
        }
    }
    unreachable!()
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(dir.join(MANIFEST_FILE), json).with_context(|| format!("writing manifest in {}", dir.display()))
    }
}
