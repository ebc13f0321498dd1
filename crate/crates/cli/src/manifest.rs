//! Run manifests and small filesystem helpers.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the resolved experiment config.
    pub config_hash: String,
    pub code_version: String,
    pub label: String,
    pub seeds: Vec<u64>,
    pub deterministic: bool,
    pub started_at: String,
    pub finished_at: Option<String>,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn begin(command: &str, config_json: &str, label: &str, seeds: &[u64]) -> Self {
        Self {
            command: command.into(),
            config_hash: hex::encode(Sha256::digest(config_json.as_bytes())),
            code_version: env!("CARGO_PKG_VERSION").into(),
            label: label.into(),
            seeds: seeds.to_vec(),
            deterministic: deterministic(),
            started_at: now(),
            finished_at: None,
            artifacts: Vec::new(),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.finished_at.is_some()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }

    /// Marks the run finished and writes the manifest one last time.
    pub fn finish(mut self, dir: &Path, mut artifacts: Vec<String>) -> Result<Self> {
        artifacts.sort();
        self.artifacts = artifacts;
        self.finished_at = Some(now());
        self.write(dir)?;
        Ok(self)
    }
}

/// Refuses to reuse a directory that holds a completed run.
pub fn prepare_run_dir(dir: &Path, allow_existing: bool) -> Result<()> {
    if dir.join(MANIFEST_FILE).exists() && !allow_existing {
        let m = RunManifest::load(dir)?;
        if m.is_complete() {
            bail!(
                "{} already holds a completed run; choose another --out",
                dir.display()
            );
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn deterministic() -> bool {
    std::env::var("FGDI_DETERMINISTIC").is_ok_and(|v| v == "1")
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed_{seed}"))
}
