use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

/// Provenance record written once per invocation.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: &'static str,
    pub config_hash: Option<String>,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub wall_time_s: f64,
    pub exit_code: i32,
    #[serde(skip)]
    started: Option<Instant>,
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION"),
            config_hash: None,
            seeds: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            wall_time_s: 0.0,
            exit_code: 0,
            started: Some(Instant::now()),
        }
    }

    pub fn write(&mut self, path: &Path, exit_code: i32) -> std::io::Result<()> {
        self.exit_code = exit_code;
        if let Some(t) = self.started {
            self.wall_time_s = t.elapsed().as_secs_f64();
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let json = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, json + "\n")
    }
}
