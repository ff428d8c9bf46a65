use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::args::Command;
use crate::Failure;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Running,
    Ok,
    Failed,
}

/// Record of one subcommand invocation. Replaying `command` reproduces every
/// output except timing fields.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub command: Command,
    /// Configuration after merging defaults, config file and flags.
    pub resolved_config: serde_json::Value,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: Option<u128>,
    pub status: Status,
    pub exit_code: Option<i32>,
    pub error: Option<String>,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

impl RunManifest {
    pub fn begin(command: &Command) -> Self {
        Self {
            subcommand: command.name().to_string(),
            command: command.clone(),
            resolved_config: serde_json::Value::Null,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            seed: None,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix_ms: now_ms(),
            finished_unix_ms: None,
            status: Status::Running,
            exit_code: None,
            error: None,
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.to_string(), path.to_path_buf());
    }

    pub fn output(&mut self, path: PathBuf) -> PathBuf {
        self.outputs.push(path.clone());
        path
    }

    pub fn config<T: Serialize>(&mut self, cfg: &T) {
        self.resolved_config = serde_json::to_value(cfg).expect("config serializes");
    }

    pub fn finish(&mut self, result: &Result<(), Failure>) {
        self.finished_unix_ms = Some(now_ms());
        match result {
            Ok(()) => {
                self.status = Status::Ok;
                self.exit_code = Some(0);
            }
            Err(f) => {
                self.status = Status::Failed;
                self.exit_code = Some(f.code);
                self.error = Some(f.err.to_string());
            }
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), Failure> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Failure::config(anyhow::anyhow!("writing {}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::config(anyhow::anyhow!("reading manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Failure::config(anyhow::anyhow!("parsing manifest {}: {e}", path.display())))
    }
}
