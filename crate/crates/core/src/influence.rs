//! Subsampled influence and memorization estimation.
//!
//! Each trial trains the learner on a Bernoulli(`p`) subset of the training
//! set and records which training and test examples the resulting model
//! classifies correctly. The influence of training example `j` on target `i`
//! is then the mean correctness of `i` over trials that included `j` minus
//! the mean over trials that excluded it. Memorization is the diagonal of
//! the train-on-train matrix.

use std::io::{Read, Write};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{u32_of, LabeledDataset};
use crate::error::{Error, Result};
use crate::models::{self, read_u32, ModelSpec, TrainConfig};

const MASK_MAGIC: &[u8; 4] = b"MASK";
const INFL_MAGIC: &[u8; 4] = b"INFL";

/// `t × n` inclusion masks, one row per trial.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix {
    n_trials: usize,
    n_examples: usize,
    bits: Vec<bool>,
    inclusion_prob: f64,
    seed: u64,
    resampled_rows: usize,
}

impl MaskMatrix {
    /// Build from explicit rows. Every row must include at least one example.
    pub fn from_rows(rows: Vec<Vec<bool>>, inclusion_prob: f64, seed: u64) -> Result<Self> {
        let n_trials = rows.len();
        let n_examples = rows.first().map_or(0, Vec::len);
        let mut bits = Vec::with_capacity(n_trials * n_examples);
        for (k, row) in rows.into_iter().enumerate() {
            if row.len() != n_examples {
                return Err(Error::Dimension {
                    what: "mask row length",
                    expected: n_examples,
                    actual: row.len(),
                });
            }
            if !row.iter().any(|&b| b) {
                return Err(Error::Config(format!("mask row {k} includes no examples")));
            }
            bits.extend(row);
        }
        Ok(Self {
            n_trials,
            n_examples,
            bits,
            inclusion_prob,
            seed,
            resampled_rows: 0,
        })
    }

    pub fn n_trials(&self) -> usize {
        self.n_trials
    }

    pub fn n_examples(&self) -> usize {
        self.n_examples
    }

    pub fn inclusion_prob(&self) -> f64 {
        self.inclusion_prob
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of rows that were redrawn because they came out empty.
    pub fn resampled_rows(&self) -> usize {
        self.resampled_rows
    }

    pub fn row(&self, k: usize) -> &[bool] {
        &self.bits[k * self.n_examples..(k + 1) * self.n_examples]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[bool]> {
        self.bits.chunks(self.n_examples.max(1)).take(self.n_trials)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MASK_MAGIC)?;
        w.write_all(&u32_of(self.n_trials)?.to_le_bytes())?;
        w.write_all(&u32_of(self.n_examples)?.to_le_bytes())?;
        w.write_all(&self.inclusion_prob.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&u32_of(self.resampled_rows)?.to_le_bytes())?;
        for row in self.rows() {
            w.write_all(&pack_bits(row))?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MASK_MAGIC {
            return Err(Error::Format("missing MASK magic".into()));
        }
        let n_trials = read_u32(&mut r)? as usize;
        let n_examples = read_u32(&mut r)? as usize;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let inclusion_prob = f64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let seed = u64::from_le_bytes(b8);
        let resampled_rows = read_u32(&mut r)? as usize;
        let mut bits = Vec::with_capacity(n_trials * n_examples);
        let mut buf = vec![0u8; n_examples.div_ceil(8)];
        for _ in 0..n_trials {
            r.read_exact(&mut buf)?;
            bits.extend(unpack_bits(&buf, n_examples));
        }
        Ok(Self {
            n_trials,
            n_examples,
            bits,
            inclusion_prob,
            seed,
            resampled_rows,
        })
    }
}

/// Draw `t` i.i.d. Bernoulli(`p`) inclusion masks over `n` examples.
/// Rows with no included example are redrawn.
pub fn sample_masks(t: usize, n: usize, p: f64, seed: u64) -> Result<MaskMatrix> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Config(format!("inclusion probability {p} not in (0, 1)")));
    }
    if t < 2 {
        return Err(Error::Config(format!("need at least 2 trials, got {t}")));
    }
    if n == 0 {
        return Err(Error::Config("cannot mask an empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bits = Vec::with_capacity(t * n);
    let mut resampled_rows = 0;
    let mut row = vec![false; n];
    for _ in 0..t {
        loop {
            for b in row.iter_mut() {
                *b = rng.random_bool(p);
            }
            if row.iter().any(|&b| b) {
                break;
            }
            resampled_rows += 1;
        }
        bits.extend_from_slice(&row);
    }
    Ok(MaskMatrix {
        n_trials: t,
        n_examples: n,
        bits,
        inclusion_prob: p,
        seed,
        resampled_rows,
    })
}

/// SplitMix64 output function; used to derive independent seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of trial `k`: `splitmix64(master ^ splitmix64(k))`.
pub fn trial_seed(master_seed: u64, trial_index: usize) -> u64 {
    splitmix64(master_seed ^ splitmix64(trial_index as u64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrialStatus {
    Completed,
    Failed { reason: String },
}

/// Outcome of one masked training run. For completed trials the correctness
/// vectors cover the full training set and the full test set; failed trials
/// carry empty vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial_index: usize,
    pub seed: u64,
    pub train_correct: Vec<bool>,
    pub test_correct: Vec<bool>,
    pub eval_accuracy: Option<f64>,
    pub status: TrialStatus,
}

impl TrialRecord {
    pub fn is_completed(&self) -> bool {
        self.status == TrialStatus::Completed
    }

    pub fn sidecar(&self) -> TrialSidecar {
        TrialSidecar {
            trial_index: self.trial_index,
            seed: self.seed,
            checkpoint_accuracy: self.eval_accuracy,
            status: self.status.clone(),
        }
    }

    /// Bit-packed correctness: `u32` train length, `u32` test length, then
    /// both vectors LSB-first, each padded to a whole byte.
    pub fn write_bits<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&u32_of(self.train_correct.len())?.to_le_bytes())?;
        w.write_all(&u32_of(self.test_correct.len())?.to_le_bytes())?;
        w.write_all(&pack_bits(&self.train_correct))?;
        w.write_all(&pack_bits(&self.test_correct))?;
        Ok(())
    }

    pub fn from_parts<R: Read>(sidecar: TrialSidecar, mut bits: R) -> Result<Self> {
        let n_train = read_u32(&mut bits)? as usize;
        let n_test = read_u32(&mut bits)? as usize;
        let mut buf = vec![0u8; n_train.div_ceil(8)];
        bits.read_exact(&mut buf)?;
        let train_correct = unpack_bits(&buf, n_train);
        let mut buf = vec![0u8; n_test.div_ceil(8)];
        bits.read_exact(&mut buf)?;
        let test_correct = unpack_bits(&buf, n_test);
        Ok(Self {
            trial_index: sidecar.trial_index,
            seed: sidecar.seed,
            train_correct,
            test_correct,
            eval_accuracy: sidecar.checkpoint_accuracy,
            status: sidecar.status,
        })
    }
}

/// JSON metadata stored next to each trial's bit file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSidecar {
    pub trial_index: usize,
    pub seed: u64,
    pub checkpoint_accuracy: Option<f64>,
    #[serde(flatten)]
    pub status: TrialStatus,
}

pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], len: usize) -> Vec<bool> {
    (0..len).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect()
}

/// What a learner reports after one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub train_correct: Vec<bool>,
    pub test_correct: Vec<bool>,
    pub eval_accuracy: Option<f64>,
}

/// A training algorithm that can be run on a masked subset.
pub trait Learner: Sync {
    /// Fit on `subset` (a restriction of `full_train`) and report correctness
    /// on every example of `full_train` and `test`.
    fn fit_evaluate(
        &self,
        subset: &LabeledDataset,
        mask: &[bool],
        full_train: &LabeledDataset,
        test: &LabeledDataset,
        seed: u64,
    ) -> Result<TrialOutcome>;
}

/// Which examples steer best-checkpoint selection inside a trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    /// The test set, as in the original protocol.
    #[default]
    Test,
    /// Training examples left out of the trial's mask.
    ExcludedTrain,
}

/// Neural network learner backed by [`models::train`].
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralLearner {
    pub spec: ModelSpec,
    pub train: TrainConfig,
    pub eval_split: EvalSplit,
}

impl Learner for NeuralLearner {
    fn fit_evaluate(
        &self,
        subset: &LabeledDataset,
        mask: &[bool],
        full_train: &LabeledDataset,
        test: &LabeledDataset,
        seed: u64,
    ) -> Result<TrialOutcome> {
        let config = TrainConfig {
            seed,
            ..self.train.clone()
        };
        let held_out;
        let eval_set = match self.eval_split {
            EvalSplit::Test => test,
            EvalSplit::ExcludedTrain => {
                let inverse: Vec<bool> = mask.iter().map(|b| !b).collect();
                held_out = full_train.restrict(&inverse)?;
                if held_out.is_empty() {
                    subset
                } else {
                    &held_out
                }
            }
        };
        let model = models::train(&self.spec, subset, eval_set, &config)?;
        Ok(TrialOutcome {
            train_correct: models::correctness(&model, full_train)?,
            test_correct: models::correctness(&model, test)?,
            eval_accuracy: model.checkpoint_accuracy(),
        })
    }
}

/// 1-nearest-neighbor classifier under squared Euclidean distance; ties go
/// to the lowest training id. Deterministic in the data alone, which makes it
/// the reference learner for checking the estimator against exact
/// enumeration.
#[derive(Debug, Clone, Copy, Default)]
pub struct OneNearestNeighbor;

impl OneNearestNeighbor {
    pub fn predict(subset: &LabeledDataset, query: ndarray::ArrayView1<'_, f32>) -> Option<u32> {
        let mut best: Option<(f64, usize)> = None;
        for j in 0..subset.len() {
            let d: f64 = subset
                .row(j)
                .iter()
                .zip(query)
                .map(|(&a, &b)| {
                    let diff = a as f64 - b as f64;
                    diff * diff
                })
                .sum();
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, j));
            }
        }
        best.map(|(_, j)| subset.labels()[j])
    }

    fn correctness(subset: &LabeledDataset, data: &LabeledDataset) -> Vec<bool> {
        (0..data.len())
            .map(|i| Self::predict(subset, data.row(i)) == Some(data.labels()[i]))
            .collect()
    }
}

impl Learner for OneNearestNeighbor {
    fn fit_evaluate(
        &self,
        subset: &LabeledDataset,
        _mask: &[bool],
        full_train: &LabeledDataset,
        test: &LabeledDataset,
        _seed: u64,
    ) -> Result<TrialOutcome> {
        if subset.is_empty() {
            return Err(Error::EmptyTrainingSet);
        }
        let test_correct = Self::correctness(subset, test);
        let acc = test_correct.iter().filter(|&&b| b).count() as f64 / test.len().max(1) as f64;
        Ok(TrialOutcome {
            train_correct: Self::correctness(subset, full_train),
            test_correct,
            eval_accuracy: Some(acc),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub n_trials: usize,
    pub inclusion_prob: f64,
    /// Expected standard deviation of the estimates; informational only.
    #[serde(default)]
    pub target_std: Option<f64>,
    #[serde(default)]
    pub eval_split: EvalSplit,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            n_trials: 100,
            inclusion_prob: 0.7,
            target_std: None,
            eval_split: EvalSplit::Test,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trials < 2 {
            return Err(Error::Config(format!(
                "need at least 2 trials, got {}",
                self.n_trials
            )));
        }
        if !(self.inclusion_prob > 0.0 && self.inclusion_prob < 1.0) {
            return Err(Error::Config(format!(
                "inclusion probability {} not in (0, 1)",
                self.inclusion_prob
            )));
        }
        Ok(())
    }

    /// Trials needed for a per-entry standard deviation of `sigma` when the
    /// target's correctness has variance 1/4: `(1/p + 1/(1-p)) / (4 sigma^2)`.
    pub fn trials_for_std(sigma: f64, p: f64) -> usize {
        ((1.0 / p + 1.0 / (1.0 - p)) / (4.0 * sigma * sigma)).ceil() as usize
    }
}

/// Runs masked trials, possibly in parallel. Results are always ordered by
/// trial index and each trial depends only on its mask and derived seed.
pub struct TrialRunner<'a, L: Learner> {
    pub train: &'a LabeledDataset,
    pub test: &'a LabeledDataset,
    pub masks: &'a MaskMatrix,
    pub learner: &'a L,
    pub master_seed: u64,
    pub jobs: usize,
}

impl<L: Learner> TrialRunner<'_, L> {
    pub fn run_one(&self, k: usize) -> TrialRecord {
        let seed = trial_seed(self.master_seed, k);
        let mask = self.masks.row(k);
        let outcome = self.train.restrict(mask).and_then(|subset| {
            self.learner
                .fit_evaluate(&subset, mask, self.train, self.test, seed)
        });
        match outcome {
            Ok(o) => TrialRecord {
                trial_index: k,
                seed,
                train_correct: o.train_correct,
                test_correct: o.test_correct,
                eval_accuracy: o.eval_accuracy,
                status: TrialStatus::Completed,
            },
            Err(e) => TrialRecord {
                trial_index: k,
                seed,
                train_correct: Vec::new(),
                test_correct: Vec::new(),
                eval_accuracy: None,
                status: TrialStatus::Failed {
                    reason: e.to_string(),
                },
            },
        }
    }

    /// Run the given trials; `on_complete` sees each record as soon as it
    /// finishes (in completion order).
    pub fn run_indices<F>(&self, indices: &[usize], on_complete: F) -> Result<Vec<TrialRecord>>
    where
        F: Fn(&TrialRecord) -> Result<()> + Sync,
    {
        if self.masks.n_examples() != self.train.len() {
            return Err(Error::Dimension {
                what: "mask width vs training set",
                expected: self.train.len(),
                actual: self.masks.n_examples(),
            });
        }
        if let Some(&k) = indices.iter().find(|&&k| k >= self.masks.n_trials()) {
            return Err(Error::Config(format!("trial {k} has no mask")));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs.max(1))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut records = pool.install(|| {
            indices
                .par_iter()
                .map(|&k| {
                    let record = self.run_one(k);
                    on_complete(&record).map(|_| record)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        records.sort_by_key(|r| r.trial_index);
        Ok(records)
    }
}

/// Run every trial in `masks`. Fails unless at least two trials complete.
pub fn run_trials<L: Learner>(
    train: &LabeledDataset,
    test: &LabeledDataset,
    masks: &MaskMatrix,
    learner: &L,
    master_seed: u64,
    jobs: usize,
) -> Result<Vec<TrialRecord>> {
    let runner = TrialRunner {
        train,
        test,
        masks,
        learner,
        master_seed,
        jobs,
    };
    let all: Vec<usize> = (0..masks.n_trials()).collect();
    let records = runner.run_indices(&all, |_| Ok(()))?;
    let completed = records.iter().filter(|r| r.is_completed()).count();
    if completed < 2 {
        let reasons: Vec<String> = records
            .iter()
            .filter_map(|r| match &r.status {
                TrialStatus::Failed { reason } => Some(format!("trial {}: {reason}", r.trial_index)),
                TrialStatus::Completed => None,
            })
            .take(3)
            .collect();
        return Err(Error::Estimation(format!(
            "only {completed} of {} trials completed ({})",
            records.len(),
            reasons.join("; ")
        )));
    }
    Ok(records)
}

/// Role of the rows of an influence matrix; columns are always training examples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Test,
    Train,
}

/// Estimated influence, `rows × cols`, row-major. Undefined entries are `NaN`.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    row_role: Target,
    counts_included: Vec<u32>,
    counts_excluded: Vec<u32>,
}

impl InfluenceMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        values: Vec<f64>,
        row_role: Target,
        counts_included: Vec<u32>,
        counts_excluded: Vec<u32>,
    ) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Dimension {
                what: "influence values",
                expected: rows * cols,
                actual: values.len(),
            });
        }
        if counts_included.len() != cols || counts_excluded.len() != cols {
            return Err(Error::Dimension {
                what: "per-column trial counts",
                expected: cols,
                actual: counts_included.len().min(counts_excluded.len()),
            });
        }
        Ok(Self {
            rows,
            cols,
            values,
            row_role,
            counts_included,
            counts_excluded,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row_role(&self) -> Target {
        self.row_role
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let v = self.values[i * self.cols + j];
        (!v.is_nan()).then_some(v)
    }

    pub fn counts_included(&self) -> &[u32] {
        &self.counts_included
    }

    pub fn counts_excluded(&self) -> &[u32] {
        &self.counts_excluded
    }

    /// `INFL` format: magic, `u8` row role (0 test, 1 train), `u32` rows and
    /// cols, row-major `f32` values with NaN for undefined entries, then the
    /// included and excluded `u32` count arrays.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(INFL_MAGIC)?;
        w.write_all(&[match self.row_role {
            Target::Test => 0u8,
            Target::Train => 1u8,
        }])?;
        w.write_all(&u32_of(self.rows)?.to_le_bytes())?;
        w.write_all(&u32_of(self.cols)?.to_le_bytes())?;
        let mut buf = Vec::with_capacity(4 * self.values.len());
        for &v in &self.values {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        for counts in [&self.counts_included, &self.counts_excluded] {
            for &c in counts.iter() {
                w.write_all(&c.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != INFL_MAGIC {
            return Err(Error::Format("missing INFL magic".into()));
        }
        let mut role = [0u8; 1];
        r.read_exact(&mut role)?;
        let row_role = match role[0] {
            0 => Target::Test,
            1 => Target::Train,
            other => return Err(Error::Format(format!("unknown row role {other}"))),
        };
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut buf = vec![0u8; 4 * rows * cols];
        r.read_exact(&mut buf)?;
        let values = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let mut read_counts = || -> Result<Vec<u32>> { (0..cols).map(|_| read_u32(&mut r)).collect() };
        let counts_included = read_counts()?;
        let counts_excluded = read_counts()?;
        Self::new(rows, cols, values, row_role, counts_included, counts_excluded)
    }
}

fn bitset(words: usize, bits: impl Iterator<Item = bool>) -> Vec<u64> {
    let mut out = vec![0u64; words];
    for (s, b) in bits.enumerate() {
        if b {
            out[s / 64] |= 1 << (s % 64);
        }
    }
    out
}

/// Estimate the influence matrix from completed trials.
///
/// With `D` the (trials × targets) correctness matrix and `M` the
/// (trials × train) masks, the included/excluded correct counts are the
/// integer products `Dᵀ M` and `Dᵀ ¬M`, evaluated on bit-packed columns.
/// Entry `(i, j)` is `(Dᵀ M)_ij / Σ_k M_kj − (Dᵀ ¬M)_ij / Σ_k ¬M_kj`.
/// Failed trials are ignored on both sides.
pub fn estimate_influence(
    records: &[TrialRecord],
    masks: &MaskMatrix,
    target: Target,
) -> Result<InfluenceMatrix> {
    let completed: Vec<&TrialRecord> = records.iter().filter(|r| r.is_completed()).collect();
    if completed.len() < 2 {
        return Err(Error::Estimation(format!(
            "need at least 2 completed trials, got {}",
            completed.len()
        )));
    }
    let n = masks.n_examples();
    let correct_of = |r: &TrialRecord| match target {
        Target::Test => r.test_correct.clone(),
        Target::Train => r.train_correct.clone(),
    };
    let m = correct_of(completed[0]).len();
    for r in &completed {
        if r.trial_index >= masks.n_trials() {
            return Err(Error::Estimation(format!(
                "trial {} has no mask",
                r.trial_index
            )));
        }
        if r.train_correct.len() != n {
            return Err(Error::Dimension {
                what: "train correctness length",
                expected: n,
                actual: r.train_correct.len(),
            });
        }
        let len = match target {
            Target::Test => r.test_correct.len(),
            Target::Train => r.train_correct.len(),
        };
        if len != m {
            return Err(Error::Dimension {
                what: "target correctness length",
                expected: m,
                actual: len,
            });
        }
    }

    let t = completed.len();
    let words = t.div_ceil(64);
    let mask_cols: Vec<u64> = (0..n)
        .flat_map(|j| bitset(words, completed.iter().map(|r| masks.row(r.trial_index)[j])))
        .collect();
    let correct_rows: Vec<Vec<bool>> = completed.iter().map(|r| correct_of(r)).collect();
    let target_rows: Vec<u64> = (0..m)
        .flat_map(|i| bitset(words, correct_rows.iter().map(|row| row[i])))
        .collect();

    let counts_included: Vec<u32> = mask_cols
        .chunks(words)
        .map(|c| c.iter().map(|w| w.count_ones()).sum())
        .collect();
    let counts_excluded: Vec<u32> = counts_included.iter().map(|&c| t as u32 - c).collect();
    if !counts_included
        .iter()
        .zip(&counts_excluded)
        .any(|(&a, &b)| a > 0 && b > 0)
    {
        return Err(Error::Estimation(
            "no training example was both included and excluded in completed trials".into(),
        ));
    }

    let mut values = vec![f64::NAN; m * n];
    values
        .par_chunks_mut(n.max(1))
        .enumerate()
        .for_each(|(i, out)| {
            let row = &target_rows[i * words..(i + 1) * words];
            let total: u32 = row.iter().map(|w| w.count_ones()).sum();
            for (j, slot) in out.iter_mut().enumerate() {
                let (n_in, n_out) = (counts_included[j], counts_excluded[j]);
                if n_in == 0 || n_out == 0 {
                    continue;
                }
                let col = &mask_cols[j * words..(j + 1) * words];
                let hit_in: u32 = row.iter().zip(col).map(|(a, b)| (a & b).count_ones()).sum();
                let hit_out = total - hit_in;
                *slot = hit_in as f64 / n_in as f64 - hit_out as f64 / n_out as f64;
            }
        });

    InfluenceMatrix::new(m, n, values, target, counts_included, counts_excluded)
}

/// Self-influence of every training example: the diagonal of the
/// train-on-train matrix. Undefined entries stay `NaN`.
pub fn memorization(train_influence: &InfluenceMatrix) -> Result<Vec<f64>> {
    if train_influence.row_role() != Target::Train {
        return Err(Error::Shape("memorization needs a train-on-train matrix".into()));
    }
    if train_influence.rows() != train_influence.cols() {
        return Err(Error::Shape(format!(
            "memorization needs a square matrix, got {}x{}",
            train_influence.rows(),
            train_influence.cols()
        )));
    }
    Ok((0..train_influence.rows())
        .map(|i| train_influence.values[i * train_influence.cols + i])
        .collect())
}

fn mean_defined(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values
        .filter(|v| !v.is_nan())
        .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

/// Per-row mean over defined entries: the average influence each target
/// receives from the training set. All-undefined rows give `NaN`.
pub fn mean_received_influence(influence: &InfluenceMatrix) -> Vec<f64> {
    (0..influence.rows())
        .map(|i| mean_defined(influence.row(i).iter().copied()))
        .collect()
}

/// Per-column mean over defined entries: the average influence each training
/// example exerts on the targets.
pub fn mean_exerted_influence(influence: &InfluenceMatrix) -> Vec<f64> {
    (0..influence.cols())
        .map(|j| mean_defined((0..influence.rows()).map(|i| influence.values[i * influence.cols + j])))
        .collect()
}
