//! Per-run provenance record. Every command writes `manifest.json` into
//! its output directory, successful or not, so a run can always be
//! reconstructed from its artifacts alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub schema: u32,
    pub command: String,
    pub recipe: Option<String>,
    /// The fully resolved config the run actually used. Feeding this back
    /// through the same command reproduces the run's metric files.
    pub config: RunConfig,
    /// Digest of command + recipe + resolved config.
    pub content_hash: String,
    /// Produced files, relative to the output directory where possible.
    pub artifacts: Vec<String>,
    pub timings_s: BTreeMap<String, f64>,
    pub metrics: BTreeMap<String, f64>,
    pub status: String,
    pub failure: Option<String>,
}

impl ExperimentManifest {
    pub fn begin(command: &str, recipe: Option<&str>, config: &RunConfig) -> Result<Self> {
        Ok(ExperimentManifest {
            schema: 1,
            command: command.to_string(),
            recipe: recipe.map(str::to_string),
            config: config.clone(),
            content_hash: content_hash(command, recipe, config)?,
            artifacts: Vec::new(),
            timings_s: BTreeMap::new(),
            metrics: BTreeMap::new(),
            status: "running".to_string(),
            failure: None,
        })
    }

    pub fn add_artifact(&mut self, out_dir: &Path, path: &Path) {
        let shown = path.strip_prefix(out_dir).unwrap_or(path);
        self.artifacts.push(shown.to_string_lossy().into_owned());
    }

    pub fn add_timing(&mut self, what: &str, seconds: f64) {
        self.timings_s.insert(what.to_string(), seconds);
    }

    pub fn add_metric(&mut self, what: &str, value: f64) {
        self.metrics.insert(what.to_string(), value);
    }

    /// Serialize to `<out>/manifest.json` through a temp file + rename so
    /// a crash mid-write never leaves a truncated manifest behind.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(out_dir)?;
        let body = serde_json::to_string_pretty(self)? + "\n";
        let tmp = out_dir.join(format!("{MANIFEST_FILE}.tmp"));
        let target = out_dir.join(MANIFEST_FILE);
        fs::write(&tmp, body)?;
        fs::rename(&tmp, &target)?;
        Ok(target)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

pub fn content_hash(command: &str, recipe: Option<&str>, config: &RunConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update(b"\n");
    h.update(recipe.unwrap_or("-").as_bytes());
    h.update(b"\n");
    h.update(serde_json::to_string(config)?.as_bytes());
    Ok(hex(&h.finalize()))
}

/// Short content digest of a file, used as the checkpoint identity in
/// evaluation reports. Content-derived, so reports stay byte-identical
/// across directories.
pub fn file_digest_short(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(hex(&digest)[..12].to_string())
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
