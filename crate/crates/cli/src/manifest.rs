use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::CliResult;

/// Build identifier: `git describe` output captured at build time when
/// available, otherwise the package version.
pub fn build_id() -> &'static str {
    option_env!("LIGHTCRL_GIT_DESCRIBE").unwrap_or(concat!("v", env!("CARGO_PKG_VERSION")))
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub build: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value, outputs: Vec<PathBuf>) -> Self {
        RunManifest {
            command: command.to_string(),
            build: build_id().to_string(),
            seed,
            config,
            started_unix: unix_now(),
            finished_unix: None,
            outputs,
        }
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn finish(&mut self, path: &Path) -> CliResult<()> {
        self.finished_unix = Some(unix_now());
        self.write(path)
    }
}
