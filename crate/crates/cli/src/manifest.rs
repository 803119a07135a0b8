//! Append-only JSONL record of every command run in a workdir.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub command: String,
    /// Hash of the effective configuration.
    pub config_hash: String,
    /// Hash of the configuration plus the command and its arguments.
    pub key: String,
    pub seed: u64,
    pub cache_hit: bool,
    pub ok: bool,
    pub unix_time: u64,
    /// Paths relative to the workdir.
    pub artifacts: Vec<PathBuf>,
    pub metrics: Value,
    pub config: Value,
}

impl Entry {
    pub fn now() -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
    }
}

pub struct Manifest {
    path: PathBuf,
}

impl Manifest {
    pub fn open(workdir: &Path) -> Result<Self> {
        fs::create_dir_all(workdir).with_context(|| format!("creating workdir {}", workdir.display()))?;
        Ok(Self { path: workdir.join(MANIFEST_FILE) })
    }

    pub fn entries(&self) -> Result<Vec<Entry>> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        let f = fs::File::open(&self.path)?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", self.path.display(), i + 1))?);
        }
        Ok(out)
    }

    /// The latest successful, non-cached entry for `key` whose artifacts all
    /// still exist under `workdir`.
    pub fn lookup(&self, key: &str, workdir: &Path) -> Result<Option<Entry>> {
        Ok(self
            .entries()?
            .into_iter()
            .rev()
            .find(|e| e.key == key && e.ok && !e.cache_hit)
            .filter(|e| e.artifacts.iter().all(|a| workdir.join(a).exists())))
    }

    pub fn append(&self, entry: &Entry) -> Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        writeln!(f, "{}", serde_json::to_string(entry)?)?;
        Ok(())
    }
}
