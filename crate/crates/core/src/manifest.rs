//! Per-run record of configuration, seed, and produced artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::trainer::write_atomic;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    /// Every effective setting, defaults included.
    pub config: serde_json::Value,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: String,
    pub artifacts: BTreeMap<String, PathBuf>,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn start(command: &str, seed: Option<u64>, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            started_unix: now(),
            finished_unix: None,
            status: "running".into(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn artifact(&mut self, name: &str, path: impl Into<PathBuf>) {
        self.artifacts.insert(name.to_string(), path.into());
    }

    pub fn finish(&mut self, ok: bool) {
        self.finished_unix = Some(now());
        self.status = if ok { "ok" } else { "failed" }.into();
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self)?;
        write_atomic(path.as_ref(), &bytes)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read(path).map_err(|e| crate::Error::io(path, e))?;
        Ok(serde_json::from_slice(&text)?)
    }
}
