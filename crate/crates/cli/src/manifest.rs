//! Provenance record written next to the outputs of every command.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::CliResult;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub config: Config,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub code_version: String,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn file_name(command: &str) -> String {
        format!("manifest_{command}.json")
    }

    pub fn write(&self, dir: &Path) -> CliResult<PathBuf> {
        crate::write_artifact(dir, &Self::file_name(&self.command), &serde_json::to_vec_pretty(self)?)
    }
}

/// Collects inputs and outputs while a command runs.
pub struct Recorder {
    command: String,
    started: Instant,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.into(),
            started: Instant::now(),
            seeds: vec![seed],
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn finish(mut self, cfg: &Config, dir: &Path) -> CliResult<RunManifest> {
        self.outputs.sort();
        self.outputs.dedup();
        let m = RunManifest {
            command: self.command,
            config_hash: cfg.hash(),
            config: cfg.clone(),
            seeds: self.seeds,
            inputs: self.inputs,
            outputs: self.outputs,
            code_version: env!("CARGO_PKG_VERSION").into(),
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        };
        m.write(dir)?;
        Ok(m)
    }
}
