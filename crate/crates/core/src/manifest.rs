//! Run manifest written atomically at the end of every command.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::write_atomic;
use crate::error::{Error, Result};

pub const RUN_MANIFEST: &str = "run.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_hash: String,
    pub corpus_hash: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Paths relative to the output directory.
    pub outputs: Vec<String>,
    pub config: RunConfig,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig, corpus_hash: &str, seed: u64, started_unix: u64) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config.hash(),
            corpus_hash: corpus_hash.to_string(),
            seed,
            started_unix,
            finished_unix: started_unix,
            outputs: Vec::new(),
            config: config.clone(),
        }
    }

    /// Stamps the finish time and writes `run.toml` into `dir`.
    pub fn finish(mut self, dir: &Path) -> Result<Self> {
        self.finished_unix = unix_now();
        self.outputs.sort();
        let text = toml::to_string(&self).map_err(|e| Error::format("run manifest", e.to_string()))?;
        write_atomic(&dir.join(RUN_MANIFEST), text.as_bytes())?;
        Ok(self)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        toml::from_str(&text).map_err(|e| Error::format("run manifest", e.to_string()))
    }
}
