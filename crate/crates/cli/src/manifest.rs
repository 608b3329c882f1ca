use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use lddmm_core::{Normalization, RigidTransform};
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

pub const FILE: &str = "manifest.json";

/// Written to every output directory before any computation starts and
/// completed when the command finishes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub inputs: Vec<(String, PathBuf)>,
    /// Full `key=value` configuration; with the inputs it reproduces the run.
    pub config: String,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub started_unix_s: f64,
    pub finished_unix_s: Option<f64>,
    pub status: String,
    pub normalization: Option<Normalization>,
    pub prealign: Option<RigidTransform>,
}

pub fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl RunManifest {
    pub fn start(command: &str, inputs: Vec<(String, PathBuf)>, config: String, out_dir: &Path, seed: u64) -> Self {
        RunManifest {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            inputs: inputs
                .into_iter()
                .map(|(k, p)| (k, std::path::absolute(&p).unwrap_or(p)))
                .collect(),
            config,
            out_dir: out_dir.to_path_buf(),
            seed,
            started_unix_s: now(),
            finished_unix_s: None,
            status: "running".into(),
            normalization: None,
            prealign: None,
        }
    }

    pub fn input(&self, key: &str) -> Option<&Path> {
        self.inputs.iter().find(|(k, _)| k == key).map(|(_, p)| p.as_path())
    }

    pub fn write(&self, dir: &Path) -> Result<(), Failure> {
        let path = dir.join(FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Failure {
            code: crate::failure::IO,
            message: e.to_string(),
        })?;
        std::fs::write(&path, text).map_err(|e| Failure::io(&path, e))
    }

    pub fn finish(&mut self, dir: &Path, status: &str) -> Result<(), Failure> {
        self.finished_unix_s = Some(now());
        self.status = status.into();
        self.write(dir)
    }

    pub fn load(dir: &Path) -> Result<Self, Failure> {
        let path = dir.join(FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Failure::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Failure {
            code: crate::failure::IO,
            message: format!("{}: {e}", path.display()),
        })
    }
}
