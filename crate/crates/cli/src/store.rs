//! Run directory layout and the append-only manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_SNAPSHOT: &str = "config.json";
pub const MASKS: &str = "masks.bin";
pub const TRIALS_DIR: &str = "trials";
pub const INFLUENCE_TEST: &str = "influence_test.infl";
pub const INFLUENCE_TRAIN: &str = "influence_train.infl";
pub const MEMORIZATION: &str = "memorization.json";
pub const MODELS_DIR: &str = "models";
pub const REPORTS_DIR: &str = "reports";
pub const REFERENCE: &str = "reference";

pub fn trial_bits(k: usize) -> String {
    format!("{TRIALS_DIR}/trial_{k:05}.bits")
}

pub fn trial_sidecar(k: usize) -> String {
    format!("{TRIALS_DIR}/trial_{k:05}.json")
}

pub fn model_params(label: &str) -> String {
    format!("{MODELS_DIR}/{label}.mgpm")
}

pub fn model_meta(label: &str) -> String {
    format!("{MODELS_DIR}/{label}.json")
}

pub fn model_predictions(label: &str) -> String {
    format!("{MODELS_DIR}/{label}.predictions.json")
}

pub fn analysis_file(label: &str) -> String {
    format!("{REPORTS_DIR}/{label}.analysis.json")
}

pub const OVERVIEW: &str = "reports/overview.json";

pub fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// A run directory. Artifacts are written once: rewriting one with
/// different bytes is refused.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> CliResult<Self> {
        let root = root.into();
        for sub in [TRIALS_DIR, MODELS_DIR, REPORTS_DIR] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self { root })
    }

    /// Open an existing run; fails with the missing-artifact code otherwise.
    pub fn open(root: impl Into<PathBuf>) -> CliResult<Self> {
        let root = root.into();
        if !root.join(MANIFEST).is_file() {
            return Err(CliError::missing(&[root.join(MANIFEST).display().to_string()]));
        }
        Self::create(root)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).is_file()
    }

    /// Paths among `rels` that do not exist, as display strings.
    pub fn missing(&self, rels: &[String]) -> Vec<String> {
        rels.iter()
            .filter(|r| !self.exists(r))
            .map(|r| self.path(r).display().to_string())
            .collect()
    }

    pub fn read(&self, rel: &str) -> CliResult<Vec<u8>> {
        fs::read(self.path(rel)).map_err(|_| CliError::missing(&[self.path(rel).display().to_string()]))
    }

    pub fn read_json<T: serde::de::DeserializeOwned>(&self, rel: &str) -> CliResult<T> {
        let bytes = self.read(rel)?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::usage(format!("{rel}: {e}")))
    }

    /// Write `bytes` unless an identical file exists. Returns whether
    /// anything was written.
    pub fn write_once(&self, rel: &str, bytes: &[u8]) -> CliResult<bool> {
        let path = self.path(rel);
        if path.exists() {
            return if fs::read(&path)? == bytes {
                Ok(false)
            } else {
                Err(CliError::conflict(&path.display().to_string()))
            };
        }
        atomic_write(&path, bytes)?;
        Ok(true)
    }

    pub fn write_json_once<T: Serialize>(&self, rel: &str, value: &T) -> CliResult<bool> {
        self.write_once(rel, &to_json_bytes(value))
    }
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    bytes
}

fn atomic_write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub command: String,
    pub completed_unix: u64,
    /// Artifact name to path relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
    #[serde(default)]
    pub details: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub tool_version: String,
    pub master_seed: u64,
    pub config: RunConfig,
    pub created_unix: u64,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(config: &RunConfig) -> Self {
        Self {
            run_id: config.run_id.clone(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            master_seed: config.seed,
            config: config.clone(),
            created_unix: now_unix(),
            entries: Vec::new(),
        }
    }

    pub fn load(run: &RunDir) -> CliResult<Self> {
        run.read_json(MANIFEST)
    }

    pub fn load_or_new(run: &RunDir, config: &RunConfig) -> CliResult<Self> {
        if run.exists(MANIFEST) {
            Self::load(run)
        } else {
            Ok(Self::new(config))
        }
    }

    /// Append `entry` and persist. Every listed artifact must exist.
    pub fn append(&mut self, run: &RunDir, entry: ManifestEntry) -> CliResult<()> {
        let rels: Vec<String> = entry.artifacts.values().cloned().collect();
        let missing: Vec<String> = rels
            .iter()
            .filter(|r| !run.path(r).exists())
            .map(|r| run.path(r).display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(CliError::missing(&missing));
        }
        self.entries.push(entry);
        atomic_write(&run.path(MANIFEST), &to_json_bytes(self))
    }

    /// Labels of compressed models, in the order they were first produced.
    pub fn compressed_labels(&self) -> Vec<String> {
        let mut labels: Vec<String> = Vec::new();
        for e in self.entries.iter().filter(|e| e.command == "compress") {
            if let Some(Value::Array(ls)) = e.details.get("methods") {
                for l in ls.iter().filter_map(Value::as_str) {
                    if !labels.iter().any(|x| x == l) {
                        labels.push(l.to_string());
                    }
                }
            }
        }
        labels
    }

    pub fn has_command(&self, command: &str) -> bool {
        self.entries.iter().any(|e| e.command == command)
    }
}

pub fn entry(command: &str, artifacts: &[(&str, String)], details: BTreeMap<String, Value>) -> ManifestEntry {
    ManifestEntry {
        command: command.to_string(),
        completed_unix: now_unix(),
        artifacts: artifacts
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect(),
        details,
    }
}
