//! The estimate, compress and analyze stages.

use std::collections::BTreeMap;
use std::io::Cursor;

use memgauge_core::analysis::{
    cie_influence_test, find_cies, histogram, CieReport, CieSubset, Histogram, TTestResult,
    TTestVariant,
};
use memgauge_core::compression::{self, CompressionSpec};
use memgauge_core::datasets::{write_mgds, LabeledDataset};
use memgauge_core::influence::{
    estimate_influence, mean_received_influence, memorization, sample_masks, splitmix64,
    trial_seed, InfluenceMatrix, MaskMatrix, NeuralLearner, Target, TrialRecord, TrialRunner,
    TrialSidecar,
};
use memgauge_core::models::{self, EpochRecord, ModelSpec, Params, TrainConfig, TrainedModel};
use memgauge_core::Error as CoreError;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{DatasetConfig, RunConfig};
use crate::error::{CliError, CliResult};
use crate::store::{self, Manifest, RunDir};

const PURPOSE_MASKS: u64 = 1;
const PURPOSE_REFERENCE: u64 = 2;
const PURPOSE_COMPRESS: u64 = 3;

/// Seed for one purpose (masks, reference training, ...) derived from the
/// master seed.
pub fn derived_seed(master: u64, purpose: u64) -> u64 {
    splitmix64(splitmix64(master) ^ purpose)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSummary {
    pub n_trials: usize,
    pub trials_run: usize,
    pub trials_completed: usize,
    pub trials_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorizationFile {
    /// `null` where a training example was never (or always) included.
    pub memorization: Vec<Option<f64>>,
    pub trials_completed: usize,
}

fn finite_or_none(v: &[f64]) -> Vec<Option<f64>> {
    v.iter().map(|x| x.is_finite().then_some(*x)).collect()
}

fn datasets_for(run: &RunDir, config: &RunConfig) -> CliResult<(LabeledDataset, LabeledDataset)> {
    let (train, test) = config.load_datasets()?;
    if matches!(config.dataset, DatasetConfig::Synthetic { .. }) {
        for (rel, d) in [("data/train.mgds", &train), ("data/test.mgds", &test)] {
            let mut bytes = Vec::new();
            write_mgds(d, &mut bytes)?;
            run.write_once(rel, &bytes)?;
        }
    }
    Ok((train, test))
}

fn load_trial(run: &RunDir, k: usize, expected_seed: u64, n_train: usize, n_test: usize) -> CliResult<Option<TrialRecord>> {
    let (bits, side) = (store::trial_bits(k), store::trial_sidecar(k));
    if !run.exists(&bits) || !run.exists(&side) {
        return Ok(None);
    }
    let sidecar: TrialSidecar = run.read_json(&side)?;
    let record = TrialRecord::from_parts(sidecar, Cursor::new(run.read(&bits)?))?;
    let sizes_ok = !record.is_completed()
        || (record.train_correct.len() == n_train && record.test_correct.len() == n_test);
    if record.seed != expected_seed || record.trial_index != k || !sizes_ok {
        return Err(CliError::conflict(&run.path(&side).display().to_string()));
    }
    Ok(Some(record))
}

fn save_trial(run: &RunDir, record: &TrialRecord) -> CliResult<()> {
    let mut bits = Vec::new();
    record.write_bits(&mut bits)?;
    // the sidecar goes last: its presence marks the trial as finished
    run.write_once(&store::trial_bits(record.trial_index), &bits)?;
    run.write_json_once(&store::trial_sidecar(record.trial_index), &record.sidecar())?;
    Ok(())
}

fn influence_bytes(m: &InfluenceMatrix) -> CliResult<Vec<u8>> {
    let mut out = Vec::new();
    m.write_to(&mut out)?;
    Ok(out)
}

/// Sample masks, run (or resume) all trials, and estimate both influence
/// matrices and memorization.
pub fn estimate(run: &RunDir, config: &RunConfig, jobs: usize) -> CliResult<EstimateSummary> {
    let mut manifest = Manifest::load_or_new(run, config)?;
    if manifest.config != *config {
        return Err(CliError::conflict(&run.path(store::MANIFEST).display().to_string()));
    }
    run.write_json_once(store::CONFIG_SNAPSHOT, config)?;
    let (train, test) = datasets_for(run, config)?;
    let est = config.estimator.to_core();
    est.validate()?;

    let masks = sample_masks(
        est.n_trials,
        train.len(),
        est.inclusion_prob,
        derived_seed(config.seed, PURPOSE_MASKS),
    )?;
    let mut mask_bytes = Vec::new();
    masks.write_to(&mut mask_bytes)?;
    run.write_once(store::MASKS, &mask_bytes)?;

    let learner = NeuralLearner {
        spec: config.model.spec(train.n_features(), train.n_classes()),
        train: config.model.train.clone(),
        eval_split: est.eval_split,
    };
    learner.spec.validate()?;
    let runner = TrialRunner {
        train: &train,
        test: &test,
        masks: &masks,
        learner: &learner,
        master_seed: config.seed,
        jobs,
    };

    let mut records = Vec::with_capacity(est.n_trials);
    let mut pending = Vec::new();
    for k in 0..est.n_trials {
        match load_trial(run, k, trial_seed(config.seed, k), train.len(), test.len())? {
            Some(r) if r.is_completed() => records.push(r),
            _ => pending.push(k),
        }
    }
    let fresh = runner.run_indices(&pending, |r| save_trial(run, r).map_err(|e| CoreError::Format(e.message)))?;
    records.extend(fresh);
    records.sort_by_key(|r| r.trial_index);

    let completed = records.iter().filter(|r| r.is_completed()).count();
    let summary = EstimateSummary {
        n_trials: est.n_trials,
        trials_run: pending.len(),
        trials_completed: completed,
        trials_failed: est.n_trials - completed,
    };
    if completed < 2 {
        let reasons: Vec<String> = records
            .iter()
            .filter_map(|r| match &r.status {
                memgauge_core::influence::TrialStatus::Failed { reason } => {
                    Some(format!("trial {}: {reason}", r.trial_index))
                }
                _ => None,
            })
            .take(3)
            .collect();
        return Err(CliError::failure(format!(
            "only {completed} of {} trials completed ({})",
            est.n_trials,
            reasons.join("; ")
        )));
    }

    let test_inf = estimate_influence(&records, &masks, Target::Test)?;
    let train_inf = estimate_influence(&records, &masks, Target::Train)?;
    run.write_once(store::INFLUENCE_TEST, &influence_bytes(&test_inf)?)?;
    run.write_once(store::INFLUENCE_TRAIN, &influence_bytes(&train_inf)?)?;
    let mem = memorization(&train_inf)?;
    run.write_json_once(
        store::MEMORIZATION,
        &MemorizationFile {
            memorization: finite_or_none(&mem),
            trials_completed: completed,
        },
    )?;

    let mut artifacts = vec![
        ("config", store::CONFIG_SNAPSHOT.to_string()),
        ("masks", store::MASKS.to_string()),
        ("trials", store::TRIALS_DIR.to_string()),
        ("influence_test", store::INFLUENCE_TEST.to_string()),
        ("influence_train", store::INFLUENCE_TRAIN.to_string()),
        ("memorization", store::MEMORIZATION.to_string()),
    ];
    if run.exists("data/train.mgds") {
        artifacts.push(("train_data", "data/train.mgds".to_string()));
        artifacts.push(("test_data", "data/test.mgds".to_string()));
    }
    let details = match serde_json::to_value(&summary).expect("serializable") {
        Value::Object(m) => m.into_iter().collect(),
        _ => BTreeMap::new(),
    };
    manifest.append(run, store::entry("estimate", &artifacts, details))?;
    Ok(summary)
}

/// Metadata stored beside each model's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub label: String,
    pub spec: ModelSpec,
    pub test_accuracy: f64,
    #[serde(default)]
    pub base_model_id: Option<String>,
    #[serde(default)]
    pub compression: Option<CompressionSpec>,
    #[serde(default)]
    pub achieved_sparsity: Option<f64>,
    #[serde(default)]
    pub distinct_values_per_tensor: Option<Vec<usize>>,
    #[serde(default)]
    pub checkpoint_epoch: Option<usize>,
    #[serde(default)]
    pub train_log: Vec<EpochRecord>,
    #[serde(default)]
    pub distill_log: Vec<compression::DistillEpoch>,
}

fn params_bytes(p: &Params) -> CliResult<Vec<u8>> {
    let mut out = Vec::new();
    p.write_to(&mut out)?;
    Ok(out)
}

fn test_accuracy(preds: &[u32], test: &LabeledDataset) -> f64 {
    let hits = preds.iter().zip(test.labels()).filter(|(p, y)| p == y).count();
    hits as f64 / test.len().max(1) as f64
}

/// The reference model trained on the full training set, loading it when
/// an earlier invocation already stored it.
fn reference_model(
    run: &RunDir,
    config: &RunConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
) -> CliResult<(TrainedModel, Vec<(&'static str, String)>)> {
    let artifacts = vec![
        ("reference_params", store::model_params(store::REFERENCE)),
        ("reference_meta", store::model_meta(store::REFERENCE)),
        ("reference_predictions", store::model_predictions(store::REFERENCE)),
    ];
    let spec = config.model.spec(train.n_features(), train.n_classes());
    if run.exists(&store::model_params(store::REFERENCE)) {
        let params = Params::read_from(Cursor::new(run.read(&store::model_params(store::REFERENCE))?))?;
        let model = TrainedModel::from_params(spec, params)?;
        return Ok((model, artifacts));
    }
    let train_cfg = TrainConfig {
        seed: derived_seed(config.seed, PURPOSE_REFERENCE),
        ..config.model.train.clone()
    };
    let trained = models::train(&spec, train, test, &train_cfg)?;
    // evaluate exactly what is stored on disk
    let model = TrainedModel {
        params: trained.params.to_storage_precision(),
        ..trained
    };
    let preds = models::predict(&model, test.features())?;
    run.write_once(&store::model_params(store::REFERENCE), &params_bytes(&model.params)?)?;
    run.write_json_once(
        &store::model_meta(store::REFERENCE),
        &ModelMeta {
            label: store::REFERENCE.into(),
            spec: model.spec.clone(),
            test_accuracy: test_accuracy(&preds, test),
            base_model_id: None,
            compression: None,
            achieved_sparsity: Some(compression::achieved_sparsity(&model.params)),
            distinct_values_per_tensor: None,
            checkpoint_epoch: Some(model.checkpoint_epoch),
            train_log: model.train_log.clone(),
            distill_log: Vec::new(),
        },
    )?;
    run.write_json_once(&store::model_predictions(store::REFERENCE), &preds)?;
    Ok((model, artifacts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressSummary {
    pub label: String,
    pub test_accuracy: f64,
    pub achieved_sparsity: f64,
}

pub fn compress(run: &RunDir, config: &RunConfig, methods: &[CompressionSpec]) -> CliResult<Vec<CompressSummary>> {
    if methods.is_empty() {
        return Err(CliError::usage(
            "no compression method: pass --method or list methods in the config's compression section",
        ));
    }
    for m in methods {
        m.validate()?;
    }
    let mut manifest = Manifest::load(run)?;
    let (train, test) = datasets_for(run, config)?;
    let (reference, mut artifacts) = reference_model(run, config, &train, &test)?;

    let mut summaries = Vec::new();
    for method in methods {
        let label = method.label();
        let out = compression::compress(
            &reference,
            store::REFERENCE,
            method,
            &train,
            derived_seed(config.seed, PURPOSE_COMPRESS),
        )?;
        let params = out.params.to_storage_precision();
        let preds = models::predict_with(&out.spec, &params, test.features())?;
        let acc = test_accuracy(&preds, &test);
        let sparsity = compression::achieved_sparsity(&params);
        run.write_once(&store::model_params(&label), &params_bytes(&params)?)?;
        run.write_json_once(
            &store::model_meta(&label),
            &ModelMeta {
                label: label.clone(),
                spec: out.spec.clone(),
                test_accuracy: acc,
                base_model_id: Some(out.base_model_id.clone()),
                compression: Some(method.clone()),
                achieved_sparsity: Some(sparsity),
                distinct_values_per_tensor: Some(compression::distinct_values_per_tensor(&params)),
                checkpoint_epoch: None,
                train_log: Vec::new(),
                distill_log: out.distill_log.clone(),
            },
        )?;
        run.write_json_once(&store::model_predictions(&label), &preds)?;
        artifacts.push(("compressed_params", store::model_params(&label)));
        artifacts.push(("compressed_meta", store::model_meta(&label)));
        artifacts.push(("compressed_predictions", store::model_predictions(&label)));
        summaries.push(CompressSummary {
            label,
            test_accuracy: acc,
            achieved_sparsity: sparsity,
        });
    }
    // artifact names must be unique per entry
    let named: Vec<(String, String)> = artifacts
        .iter()
        .map(|(k, v)| {
            let stem = v.rsplit('/').next().unwrap_or(v);
            (format!("{k}:{stem}"), v.clone())
        })
        .collect();
    let named_ref: Vec<(&str, String)> = named.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    let mut details = BTreeMap::new();
    details.insert(
        "methods".to_string(),
        json!(summaries.iter().map(|s| s.label.clone()).collect::<Vec<_>>()),
    );
    manifest.append(run, store::entry("compress", &named_ref, details))?;
    Ok(summaries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestEntry {
    pub subset: CieSubset,
    pub variant: TTestVariant,
    pub result: Option<TTestResult>,
    /// Why no result was produced.
    pub notice: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodAnalysis {
    pub label: String,
    pub method: String,
    pub reference_test_accuracy: f64,
    pub compressed_test_accuracy: f64,
    pub cie_report: CieReport,
    pub tests: Vec<TestEntry>,
    pub cie_histogram: Option<Histogram>,
    pub non_cie_histogram: Option<Histogram>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overview {
    pub run_id: String,
    pub n_train: usize,
    pub n_test: usize,
    pub trials_completed: usize,
    /// Histogram of each test example's mean received influence.
    pub influence_histogram: Histogram,
    pub near_zero_threshold: f64,
    /// Fraction of test examples with |mean received influence| below the
    /// threshold, among those where it is defined.
    pub near_zero_fraction: f64,
    pub memorization_histogram: Option<Histogram>,
}

fn test_entries(inf: &InfluenceMatrix, report: &CieReport) -> CliResult<Vec<TestEntry>> {
    let mut out = Vec::new();
    for subset in CieSubset::ALL {
        for variant in [TTestVariant::StudentPooled, TTestVariant::Welch] {
            let entry = match cie_influence_test(inf, report, subset, variant) {
                Ok(r) => TestEntry {
                    subset,
                    variant,
                    result: Some(r),
                    notice: None,
                },
                Err(e @ (CoreError::DegenerateTest(_) | CoreError::EmptyData)) => TestEntry {
                    subset,
                    variant,
                    result: None,
                    notice: Some(e.to_string()),
                },
                Err(e) => return Err(e.into()),
            };
            out.push(entry);
        }
    }
    Ok(out)
}

fn optional_histogram(values: &[f64], n_bins: usize) -> CliResult<Option<Histogram>> {
    match histogram(values, n_bins) {
        Ok(h) => Ok(Some(h)),
        Err(CoreError::EmptyData) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// CIE extraction, t-tests and histograms for every compressed model.
pub fn analyze(run: &RunDir, config: &RunConfig) -> CliResult<Vec<MethodAnalysis>> {
    let mut manifest = Manifest::load(run)?;
    let labels = manifest.compressed_labels();
    let mut required = vec![
        store::INFLUENCE_TEST.to_string(),
        store::model_predictions(store::REFERENCE),
    ];
    required.extend(labels.iter().map(|l| store::model_predictions(l)));
    let mut missing = run.missing(&required);
    if labels.is_empty() {
        missing.push(run.path(&store::model_predictions("<compressed>")).display().to_string());
    }
    if !missing.is_empty() {
        return Err(CliError::missing(&missing));
    }

    let inf = InfluenceMatrix::read_from(Cursor::new(run.read(store::INFLUENCE_TEST)?))?;
    let (_, test) = config.load_datasets()?;
    if inf.rows() != test.len() {
        return Err(CliError::usage(format!(
            "influence matrix has {} rows but the test set has {} examples",
            inf.rows(),
            test.len()
        )));
    }
    let means = mean_received_influence(&inf);
    let n_bins = config.analysis.n_bins;
    let threshold = config.analysis.near_zero_threshold;
    let defined: Vec<f64> = means.iter().copied().filter(|v| v.is_finite()).collect();
    let near_zero = defined.iter().filter(|v| v.abs() < threshold).count();
    let mem_hist = if run.exists(store::MEMORIZATION) {
        let m: MemorizationFile = run.read_json(store::MEMORIZATION)?;
        let vals: Vec<f64> = m.memorization.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        optional_histogram(&vals, n_bins)?
    } else {
        None
    };
    let trials_completed = inf
        .counts_included()
        .iter()
        .zip(inf.counts_excluded())
        .map(|(a, b)| (a + b) as usize)
        .max()
        .unwrap_or(0);
    let overview = Overview {
        run_id: config.run_id.clone(),
        n_train: inf.cols(),
        n_test: inf.rows(),
        trials_completed,
        influence_histogram: histogram(&means, n_bins)?,
        near_zero_threshold: threshold,
        near_zero_fraction: near_zero as f64 / defined.len().max(1) as f64,
        memorization_histogram: mem_hist,
    };
    run.write_json_once(store::OVERVIEW, &overview)?;

    let ref_preds: Vec<u32> = run.read_json(&store::model_predictions(store::REFERENCE))?;
    let mut artifacts = vec![("overview".to_string(), store::OVERVIEW.to_string())];
    let mut analyses = Vec::new();
    for label in &labels {
        let comp_preds: Vec<u32> = run.read_json(&store::model_predictions(label))?;
        let meta: ModelMeta = run.read_json(&store::model_meta(label))?;
        let report = find_cies(&ref_preds, &comp_preds, test.labels())?.with_model_ids(store::REFERENCE, label);
        let pick = |idx: &[usize]| -> Vec<f64> { idx.iter().map(|&i| means[i]).collect() };
        let analysis = MethodAnalysis {
            label: label.clone(),
            method: meta
                .compression
                .as_ref()
                .map(|c| c.method_name().to_string())
                .unwrap_or_default(),
            reference_test_accuracy: test_accuracy(&ref_preds, &test),
            compressed_test_accuracy: meta.test_accuracy,
            tests: test_entries(&inf, &report)?,
            cie_histogram: optional_histogram(&pick(&report.cie), n_bins)?,
            non_cie_histogram: optional_histogram(&pick(&report.non_cie), n_bins)?,
            cie_report: report,
        };
        run.write_json_once(&store::analysis_file(label), &analysis)?;
        artifacts.push((format!("analysis:{label}"), store::analysis_file(label)));
        analyses.push(analysis);
    }
    let artifacts_ref: Vec<(&str, String)> = artifacts.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    let mut details = BTreeMap::new();
    details.insert("methods".to_string(), json!(labels));
    manifest.append(run, store::entry("analyze", &artifacts_ref, details))?;
    Ok(analyses)
}

/// Masks stored for a run, for callers that want to inspect them.
pub fn read_masks(run: &RunDir) -> CliResult<MaskMatrix> {
    Ok(MaskMatrix::read_from(Cursor::new(run.read(store::MASKS)?))?)
}
