use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Result;
use serde::Serialize;

use crate::common::write_json;

pub use footstrike::dataio::MANIFEST_FILE as FILE_NAME;

/// Record of one command run, written next to its outputs.
#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'static str,
    seed: Option<u64>,
    config: serde_json::Value,
    artifacts: Vec<String>,
    wall_ms: f64,
}

pub struct Run {
    command: &'static str,
    seed: Option<u64>,
    config: serde_json::Value,
    started: Instant,
}

impl Run {
    pub fn start(command: &'static str, seed: Option<u64>, config: &impl Serialize) -> Result<Self> {
        Ok(Self { command, seed, config: serde_json::to_value(config)?, started: Instant::now() })
    }

    /// Writes the manifest into `dir`, listing artifacts relative to it.
    pub fn finish(self, dir: &Path, artifacts: &[PathBuf]) -> Result<PathBuf> {
        let artifacts = artifacts.iter().map(|p| p.strip_prefix(dir).unwrap_or(p).display().to_string()).collect();
        let m = Manifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.seed,
            config: self.config,
            artifacts,
            wall_ms: self.started.elapsed().as_secs_f64() * 1e3,
        };
        write_json(&dir.join(FILE_NAME), &m)
    }
}
