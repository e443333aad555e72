//! Run configuration: one JSON document plus command-line overrides.

use std::path::{Path, PathBuf};

use memgauge_core::compression::CompressionSpec;
use memgauge_core::datasets::{self, LabeledDataset, LongTailConfig};
use memgauge_core::influence::{EstimatorConfig, EvalSplit};
use memgauge_core::models::{Activation, Architecture, ModelSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "MEMGAUGE_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub estimator: EstimatorSection,
    #[serde(default)]
    pub compression: Vec<CompressionSpec>,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Generated long-tail mixture; `seed` defaults to the master seed.
    Synthetic {
        longtail: LongTailConfig,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Directory holding `data_batch_{1..5}.bin` and `test_batch.bin`.
    Cifar10 {
        dir: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    Mgds {
        train: PathBuf,
        test: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    #[serde(default)]
    pub layer_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ModelConfig {
    pub fn spec(&self, n_features: usize, n_classes: usize) -> ModelSpec {
        ModelSpec {
            architecture: self.architecture,
            layer_widths: self.layer_widths.clone(),
            activation: self.activation,
            n_features,
            n_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorSection {
    pub trials: usize,
    pub mask_prob: f64,
    pub eval_split: EvalSplit,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        let d = EstimatorConfig::default();
        Self {
            trials: d.n_trials,
            mask_prob: d.inclusion_prob,
            eval_split: d.eval_split,
        }
    }
}

impl EstimatorSection {
    pub fn to_core(&self) -> EstimatorConfig {
        EstimatorConfig {
            n_trials: self.trials,
            inclusion_prob: self.mask_prob,
            target_std: None,
            eval_split: self.eval_split,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub n_bins: usize,
    /// Magnitude below which a mean influence counts as "near zero".
    pub near_zero_threshold: f64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            n_bins: 40,
            near_zero_threshold: 1e-3,
        }
    }
}

impl RunConfig {
    /// Read `path`, apply dot-path `overrides` and the seed environment
    /// variable, then validate.
    pub fn load(path: &Path, overrides: &[(String, String)], env_seed: Option<&str>) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        for (key, raw) in overrides {
            set_path(&mut value, key, parse_override(raw))?;
        }
        if let Some(s) = env_seed {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| CliError::usage(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
            set_path(&mut value, "seed", Value::from(seed))?;
        }
        let mut config: RunConfig = serde_json::from_value(value)
            .map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.run_id.is_empty()
            || !self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            || self.run_id.starts_with('.')
        {
            return Err(CliError::usage(format!(
                "run_id {:?} must be non-empty and use only [A-Za-z0-9._-]",
                self.run_id
            )));
        }
        self.estimator.to_core().validate()?;
        self.model.train.validate()?;
        for c in &self.compression {
            c.validate()?;
        }
        if let DatasetConfig::Synthetic { longtail, .. } = &self.dataset {
            longtail.validate()?;
        }
        if self.analysis.n_bins == 0 {
            return Err(CliError::usage("analysis.n_bins must be positive"));
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.dataset {
            DatasetConfig::Cifar10 { dir, .. } => fix(dir),
            DatasetConfig::Mgds { train, test } => {
                fix(train);
                fix(test);
            }
            DatasetConfig::Synthetic { .. } => {}
        }
    }

    pub fn load_datasets(&self) -> CliResult<(LabeledDataset, LabeledDataset)> {
        match &self.dataset {
            DatasetConfig::Synthetic { longtail, seed } => {
                Ok(datasets::generate_longtail(longtail, seed.unwrap_or(self.seed))?)
            }
            DatasetConfig::Cifar10 {
                dir,
                train_limit,
                test_limit,
            } => {
                let mut parts = Vec::new();
                let mut remaining = *train_limit;
                for b in 1..=5 {
                    if remaining == Some(0) {
                        break;
                    }
                    let path = dir.join(format!("data_batch_{b}.bin"));
                    if !path.exists() {
                        if b == 1 {
                            return Err(CliError::missing(&[path.display().to_string()]));
                        }
                        break;
                    }
                    let part = datasets::load_cifar10(&path, remaining)?;
                    remaining = remaining.map(|r| r - part.len());
                    parts.push(part);
                }
                let test_path = dir.join("test_batch.bin");
                if !test_path.exists() {
                    return Err(CliError::missing(&[test_path.display().to_string()]));
                }
                let test = datasets::load_cifar10(&test_path, *test_limit)?;
                Ok((LabeledDataset::concat(&parts)?, test))
            }
            DatasetConfig::Mgds { train, test } => {
                let read = |p: &Path| -> CliResult<LabeledDataset> {
                    let f = std::fs::File::open(p)
                        .map_err(|_| CliError::missing(&[p.display().to_string()]))?;
                    Ok(datasets::read_mgds(std::io::BufReader::new(f))?)
                };
                Ok((read(train)?, read(test)?))
            }
        }
    }
}

/// Interpret an override as JSON when possible, otherwise as a string.
fn parse_override(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Set `value[a][b]...` for the dot path `a.b...`, creating objects as needed.
/// Numeric segments index into arrays.
pub fn set_path(value: &mut Value, path: &str, new: Value) -> CliResult<()> {
    let mut cur = value;
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(CliError::usage(format!("malformed override path {path:?}")));
    }
    let (last, parents) = segments.split_last().expect("non-empty split");
    for seg in parents {
        cur = step(cur, seg, path)?;
    }
    *step(cur, last, path)? = new;
    Ok(())
}

fn step<'a>(cur: &'a mut Value, seg: &str, path: &str) -> CliResult<&'a mut Value> {
    match cur {
        Value::Array(items) => {
            let i: usize = seg
                .parse()
                .map_err(|_| CliError::usage(format!("{path}: {seg:?} is not an array index")))?;
            let len = items.len();
            items
                .get_mut(i)
                .ok_or_else(|| CliError::usage(format!("{path}: index {i} out of range ({len})")))
        }
        Value::Object(map) => {
            Ok(map
                .entry(seg.to_string())
                .or_insert_with(|| Value::Object(Default::default())))
        }
        _ => Err(CliError::usage(format!("{path}: cannot descend into a scalar at {seg:?}"))),
    }
}
