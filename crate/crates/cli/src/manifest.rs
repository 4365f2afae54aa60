use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

pub const FILE: &str = "run_manifest.json";

/// Provenance for one command invocation. Written before any long-running
/// work starts and rewritten with the end time and outputs on success.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub seed: u64,
    /// Every setting the command ran with, defaults included.
    pub config: Value,
    pub dataset_fingerprint: Option<String>,
    pub started_at: u64,
    pub finished_at: Option<u64>,
    pub outputs: Vec<PathBuf>,
    #[serde(skip)]
    dir: PathBuf,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn begin(command: &str, seed: u64, config: Value, fingerprint: Option<String>, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let m = Self {
            command: command.into(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config,
            dataset_fingerprint: fingerprint,
            started_at: now(),
            finished_at: None,
            outputs: Vec::new(),
            dir: dir.to_path_buf(),
        };
        m.write()?;
        Ok(m)
    }

    /// Writes `contents` under the run directory and records the path.
    pub fn output(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(path.clone());
        Ok(path)
    }

    pub fn record(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    pub fn finish(mut self) -> Result<()> {
        self.finished_at = Some(now());
        self.write()
    }

    fn write(&self) -> Result<()> {
        let path = self.dir.join(FILE);
        fs::write(&path, serde_json::to_vec_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }
}
