//! Compressed variants of a reference model: magnitude pruning, uniform
//! quantization and distillation fine-tuning.
//!
//! Distillation minimizes
//! `w_ce · CE(student, labels) + w_kd · τ² · KL(softmax(teacher/τ) ‖ softmax(student/τ))`.
//! With adaptive weighting the pair `(w_ce, w_kd)` is recomputed before every
//! epoch as `softmax(β · slope)`, where `slope` is the least-squares slope of
//! each component's per-epoch loss over the last `window` epochs. A component
//! whose loss falls fastest therefore gets the smaller weight.

use std::cell::{Cell, RefCell};

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::{
    self, backward, cross_entropy, forward, log_softmax_row, run_sgd, ModelSpec, Params,
    SgdSettings, TrainedModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneScope {
    #[default]
    Global,
    PerTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossWeighting {
    Fixed {
        w_ce: f64,
        w_kd: f64,
    },
    Adaptive {
        window: usize,
        #[serde(default = "default_sensitivity")]
        sensitivity: f64,
    },
}

fn default_sensitivity() -> f64 {
    0.1
}

fn default_temperature() -> f64 {
    2.0
}

fn default_momentum() -> f64 {
    0.9
}

fn default_batch_size() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    pub weighting: LossWeighting,
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Hidden widths of a freshly initialized student for plain `distill`;
    /// `None` reuses the teacher's widths.
    #[serde(default)]
    pub student_widths: Option<Vec<usize>>,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        match self.weighting {
            LossWeighting::Fixed { w_ce, w_kd } => {
                if !(w_ce >= 0.0 && w_kd >= 0.0) || (w_ce == 0.0 && w_kd == 0.0) {
                    return Err(Error::Config(
                        "fixed weights must be non-negative and not both zero".into(),
                    ));
                }
            }
            LossWeighting::Adaptive { window, sensitivity } => {
                if window < 2 {
                    return Err(Error::Config("adaptive window must be at least 2".into()));
                }
                if window > self.epochs {
                    return Err(Error::Config(format!(
                        "adaptive window {window} exceeds {} epochs",
                        self.epochs
                    )));
                }
                if !(sensitivity > 0.0 && sensitivity.is_finite()) {
                    return Err(Error::Config("adaptive sensitivity must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum CompressionSpec {
    Prune {
        sparsity: f64,
        #[serde(default)]
        scope: PruneScope,
    },
    Quantize {
        bits: u32,
    },
    Distill {
        distill: DistillConfig,
    },
    PruneThenDistill {
        sparsity: f64,
        #[serde(default)]
        scope: PruneScope,
        distill: DistillConfig,
    },
}

impl CompressionSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Prune { sparsity, .. } => check_sparsity(*sparsity),
            Self::Quantize { bits } => check_bits(*bits),
            Self::Distill { distill } => distill.validate(),
            Self::PruneThenDistill {
                sparsity, distill, ..
            } => {
                check_sparsity(*sparsity)?;
                distill.validate()
            }
        }
    }

    pub fn method_name(&self) -> &'static str {
        match self {
            Self::Prune { .. } => "prune",
            Self::Quantize { .. } => "quantize",
            Self::Distill { .. } => "distill",
            Self::PruneThenDistill { .. } => "prune_then_distill",
        }
    }

    /// Short identifier used for artifact names, e.g. `prune-s0.9`.
    pub fn label(&self) -> String {
        let weighting = |d: &DistillConfig| match d.weighting {
            LossWeighting::Fixed { w_ce, w_kd } => format!("fixed{w_ce}-{w_kd}"),
            LossWeighting::Adaptive { window, sensitivity } => {
                format!("adaptive{window}-{sensitivity}")
            }
        };
        match self {
            Self::Prune { sparsity, scope } => format!("prune-s{sparsity}{}", scope_suffix(*scope)),
            Self::Quantize { bits } => format!("quantize-b{bits}"),
            Self::Distill { distill } => format!("distill-{}", weighting(distill)),
            Self::PruneThenDistill {
                sparsity,
                scope,
                distill,
            } => format!(
                "prune_then_distill-s{sparsity}{}-{}",
                scope_suffix(*scope),
                weighting(distill)
            ),
        }
    }

    fn sparsity(&self) -> Option<f64> {
        match self {
            Self::Prune { sparsity, .. } | Self::PruneThenDistill { sparsity, .. } => {
                Some(*sparsity)
            }
            _ => None,
        }
    }
}

fn scope_suffix(scope: PruneScope) -> &'static str {
    match scope {
        PruneScope::Global => "",
        PruneScope::PerTensor => "-per_tensor",
    }
}

fn check_sparsity(sparsity: f64) -> Result<()> {
    if (0.0..1.0).contains(&sparsity) {
        Ok(())
    } else {
        Err(Error::Config(format!("sparsity {sparsity} not in [0, 1)")))
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if (1..=16).contains(&bits) {
        Ok(())
    } else {
        Err(Error::Config(format!("bits {bits} not in [1, 16]")))
    }
}

/// Per-epoch record of a distillation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillEpoch {
    pub epoch: usize,
    /// Mean cross-entropy against the labels.
    pub ce: f64,
    /// Mean `τ²`-scaled KL divergence from the teacher.
    pub kd: f64,
    pub w_ce: f64,
    pub w_kd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillOutcome {
    pub params: Params,
    pub log: Vec<DistillEpoch>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedModel {
    pub base_model_id: String,
    pub compression: CompressionSpec,
    pub spec: ModelSpec,
    pub params: Params,
    pub achieved_sparsity: f64,
    pub distinct_values_per_tensor: Vec<usize>,
    pub distill_log: Vec<DistillEpoch>,
}

/// Entries of weight tensors that must stay at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroMask(Vec<Vec<bool>>);

impl ZeroMask {
    /// Every exactly-zero weight entry (biases are never frozen).
    pub fn of_weights(params: &Params) -> Self {
        Self(
            params
                .tensors()
                .iter()
                .map(|t| {
                    t.data
                        .iter()
                        .map(|&v| !t.is_bias() && v == 0.0)
                        .collect()
                })
                .collect(),
        )
    }

    pub fn frozen_count(&self) -> usize {
        self.0.iter().flatten().filter(|&&b| b).count()
    }

    pub fn is_zero_in(&self, params: &Params) -> bool {
        params
            .tensors()
            .iter()
            .zip(&self.0)
            .all(|(t, m)| t.data.iter().zip(m).all(|(&v, &f)| !f || v == 0.0))
    }
}

/// `ceil(fraction * n)`, treating values within 1e-9 of an integer as exact.
fn count_for_fraction(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let r = x.round();
    let k = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (k as usize).min(n)
}

/// Zero the `sparsity` fraction of weight entries with the smallest absolute
/// value. Bias tensors are exempt. Ties are broken by tensor order, then flat
/// index. Surviving entries are untouched.
pub fn prune_magnitude(params: &Params, sparsity: f64, scope: PruneScope) -> Result<Params> {
    check_sparsity(sparsity)?;
    let mut out = params.clone();
    let weight_tensors: Vec<usize> = (0..params.tensors().len())
        .filter(|&t| !params.tensors()[t].is_bias())
        .collect();
    let groups: Vec<Vec<usize>> = match scope {
        PruneScope::Global => vec![weight_tensors],
        PruneScope::PerTensor => weight_tensors.into_iter().map(|t| vec![t]).collect(),
    };
    for group in groups {
        let mut entries: Vec<(f64, usize, usize)> = group
            .iter()
            .flat_map(|&t| {
                params.tensors()[t]
                    .data
                    .iter()
                    .enumerate()
                    .map(move |(k, v)| (v.abs(), t, k))
            })
            .collect();
        let n_prune = count_for_fraction(sparsity, entries.len());
        entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for &(_, t, k) in &entries[..n_prune] {
            out.tensors_mut()[t].data[k] = 0.0;
        }
    }
    Ok(out)
}

/// Snap every entry of every tensor to the nearest of `2^bits` levels spread
/// evenly over that tensor's `[min, max]`; halves round away from zero.
/// Constant tensors are returned unchanged.
pub fn quantize_uniform(params: &Params, bits: u32) -> Result<Params> {
    check_bits(bits)?;
    let top = ((1u64 << bits) - 1) as f64;
    let mut out = params.clone();
    for t in out.tensors_mut() {
        let (min, max) = t
            .data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if !(max > min) || !(max - min).is_finite() {
            continue;
        }
        let step = (max - min) / top;
        for v in &mut t.data {
            let k = ((*v - min) / step).round().clamp(0.0, top);
            *v = if k == top { max } else { min + k * step };
        }
    }
    Ok(out)
}

/// Fraction of exactly-zero entries over all weight tensors.
pub fn achieved_sparsity(params: &Params) -> f64 {
    let (zeros, total) = params
        .tensors()
        .iter()
        .filter(|t| !t.is_bias())
        .flat_map(|t| &t.data)
        .fold((0usize, 0usize), |(z, n), &v| (z + (v == 0.0) as usize, n + 1));
    if total == 0 {
        0.0
    } else {
        zeros as f64 / total as f64
    }
}

pub fn distinct_values_per_tensor(params: &Params) -> Vec<usize> {
    params
        .tensors()
        .iter()
        .map(|t| {
            let mut v = t.data.clone();
            v.sort_by(f64::total_cmp);
            v.dedup_by(|a, b| a == b);
            v.len()
        })
        .collect()
}

fn softmax_row(row: ArrayView1<'_, f64>, temperature: f64) -> Vec<f64> {
    log_softmax_row(row, temperature).iter().map(|v| v.exp()).collect()
}

/// Softened teacher distribution at temperature `τ` for every row.
fn soft_targets(teacher_logits: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = Array2::zeros(teacher_logits.raw_dim());
    for (src, mut dst) in teacher_logits.rows().into_iter().zip(out.rows_mut()) {
        for (d, s) in dst.iter_mut().zip(softmax_row(src, temperature)) {
            *d = s;
        }
    }
    out
}

/// Summed `τ²·KL(p_teacher ‖ p_student)` over the batch; adds `scale` times its
/// gradient with respect to the student logits, `τ (p_student − p_teacher)`,
/// into `dlogits`.
fn kd_term(
    student_logits: &Array2<f64>,
    targets: impl Iterator<Item = Vec<f64>>,
    temperature: f64,
    scale: f64,
    dlogits: &mut Array2<f64>,
) -> f64 {
    let mut total = 0.0;
    for ((row, mut drow), pt) in student_logits
        .rows()
        .into_iter()
        .zip(dlogits.rows_mut())
        .zip(targets)
    {
        let logq = log_softmax_row(row, temperature);
        let mut kl = 0.0;
        for (c, d) in drow.iter_mut().enumerate() {
            if pt[c] > 0.0 {
                kl += pt[c] * (pt[c].ln() - logq[c]);
            }
            *d += scale * temperature * (logq[c].exp() - pt[c]);
        }
        total += temperature * temperature * kl;
    }
    total
}

/// Mean distillation objective on a batch and its gradient with respect to
/// the student parameters.
#[allow(clippy::too_many_arguments)]
pub fn distillation_loss_and_gradient(
    spec: &ModelSpec,
    student: &Params,
    teacher_logits: &Array2<f64>,
    features: &Array2<f64>,
    labels: &[u32],
    temperature: f64,
    w_ce: f64,
    w_kd: f64,
) -> (f64, Params) {
    let cache = forward(spec, student, features.clone());
    let mut dlogits = Array2::zeros(cache.logits.raw_dim());
    let scale = 1.0 / labels.len() as f64;
    let targets = soft_targets(teacher_logits, temperature);
    let ce = cross_entropy(&cache.logits, labels.iter().copied(), w_ce * scale, &mut dlogits);
    let kd = kd_term(
        &cache.logits,
        targets.rows().into_iter().map(|r| r.to_vec()),
        temperature,
        w_kd * scale,
        &mut dlogits,
    );
    let loss = (w_ce * ce + w_kd * kd) * scale;
    (loss, backward(spec, student, &cache, dlogits))
}

/// Least-squares slope of `ys` against `0, 1, 2, …`.
fn slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let mean_x = (n - 1.0) / 2.0;
    let mean_y = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mean_x;
        sxy += dx * (y - mean_y);
        sxx += dx * dx;
    }
    sxy / sxx
}

/// Adaptive weights from the recent loss trajectories of the two components.
pub fn adaptive_weights(ce_history: &[f64], kd_history: &[f64], window: usize, sensitivity: f64) -> (f64, f64) {
    if ce_history.len() < window || kd_history.len() < window {
        return (0.5, 0.5);
    }
    let s_ce = sensitivity * slope(&ce_history[ce_history.len() - window..]);
    let s_kd = sensitivity * slope(&kd_history[kd_history.len() - window..]);
    let m = s_ce.max(s_kd);
    let (e_ce, e_kd) = ((s_ce - m).exp(), (s_kd - m).exp());
    (e_ce / (e_ce + e_kd), e_kd / (e_ce + e_kd))
}

/// Fine-tune `student` toward `teacher` on `data`.
///
/// Entries marked in `frozen` stay at zero throughout. With fixed weights
/// `(1, 0)` this follows exactly the trajectory of [`models::train`] from
/// the same initialization and seed.
pub fn distill_finetune(
    student: &Params,
    spec: &ModelSpec,
    teacher: &TrainedModel,
    data: &LabeledDataset,
    cfg: &DistillConfig,
    seed: u64,
    frozen: Option<&ZeroMask>,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    spec.validate()?;
    student.validate(spec)?;
    if teacher.spec.n_classes != spec.n_classes {
        return Err(Error::Dimension {
            what: "teacher vs student classes",
            expected: spec.n_classes,
            actual: teacher.spec.n_classes,
        });
    }
    if data.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if data.n_features() != spec.n_features {
        return Err(Error::Dimension {
            what: "feature width",
            expected: spec.n_features,
            actual: data.n_features(),
        });
    }

    let teacher_logits = models::logits(&teacher.spec, &teacher.params, data.features())?;
    let targets = soft_targets(&teacher_logits, cfg.temperature);
    let labels = data.labels();
    let tau = cfg.temperature;

    let initial = match cfg.weighting {
        LossWeighting::Fixed { w_ce, w_kd } => (w_ce, w_kd),
        LossWeighting::Adaptive { .. } => (0.5, 0.5),
    };
    let weights = Cell::new(initial);
    let sums = Cell::new((0.0f64, 0.0f64));
    let log = RefCell::new(Vec::with_capacity(cfg.epochs));

    let mut params = student.clone();
    if let Some(mask) = frozen {
        if !mask.is_zero_in(&params) {
            return Err(Error::Config("frozen entries of the student are not zero".into()));
        }
    }
    let settings = SgdSettings {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        momentum: cfg.momentum,
        seed,
    };
    let n = data.len() as f64;

    run_sgd(
        spec,
        &mut params,
        data,
        &settings,
        frozen.map(|m| m.0.as_slice()),
        |rows, logits, dlogits| {
            let (w_ce, w_kd) = weights.get();
            let scale = 1.0 / rows.len() as f64;
            let ce = cross_entropy(logits, rows.iter().map(|&i| labels[i]), w_ce * scale, dlogits);
            let soft = rows.iter().map(|&i| targets.row(i).to_vec());
            // a zero KD weight must leave the CE gradient bit-for-bit untouched
            let kd = if w_kd == 0.0 {
                let mut scratch = Array2::zeros(logits.raw_dim());
                kd_term(logits, soft, tau, 0.0, &mut scratch)
            } else {
                kd_term(logits, soft, tau, w_kd * scale, dlogits)
            };
            let (s_ce, s_kd) = sums.get();
            sums.set((s_ce + ce, s_kd + kd));
            w_ce * ce + w_kd * kd
        },
        |epoch, _, _| {
            let (w_ce, w_kd) = weights.get();
            let (s_ce, s_kd) = sums.replace((0.0, 0.0));
            let mut log = log.borrow_mut();
            log.push(DistillEpoch {
                epoch,
                ce: s_ce / n,
                kd: s_kd / n,
                w_ce,
                w_kd,
            });
            if let LossWeighting::Adaptive { window, sensitivity } = cfg.weighting {
                let ce: Vec<f64> = log.iter().map(|e| e.ce).collect();
                let kd: Vec<f64> = log.iter().map(|e| e.kd).collect();
                weights.set(adaptive_weights(&ce, &kd, window, sensitivity));
            }
            Ok(())
        },
    )?;

    Ok(DistillOutcome {
        params,
        log: log.into_inner(),
    })
}

/// Apply `compression` to `reference`. Distillation uses `data` (the
/// training set) only.
pub fn compress(
    reference: &TrainedModel,
    base_model_id: &str,
    compression: &CompressionSpec,
    data: &LabeledDataset,
    seed: u64,
) -> Result<CompressedModel> {
    compression.validate()?;
    let (spec, params, distill_log) = match compression {
        CompressionSpec::Prune { sparsity, scope } => (
            reference.spec.clone(),
            prune_magnitude(&reference.params, *sparsity, *scope)?,
            Vec::new(),
        ),
        CompressionSpec::Quantize { bits } => (
            reference.spec.clone(),
            quantize_uniform(&reference.params, *bits)?,
            Vec::new(),
        ),
        CompressionSpec::Distill { distill } => {
            let mut spec = reference.spec.clone();
            if let Some(widths) = &distill.student_widths {
                spec.layer_widths = widths.clone();
            }
            spec.validate()?;
            let init = Params::init(&spec, seed);
            let out = distill_finetune(&init, &spec, reference, data, distill, seed, None)?;
            (spec, out.params, out.log)
        }
        CompressionSpec::PruneThenDistill {
            sparsity,
            scope,
            distill,
        } => {
            let pruned = prune_magnitude(&reference.params, *sparsity, *scope)?;
            let mask = ZeroMask::of_weights(&pruned);
            let out = distill_finetune(
                &pruned,
                &reference.spec,
                reference,
                data,
                distill,
                seed,
                Some(&mask),
            )?;
            (reference.spec.clone(), out.params, out.log)
        }
    };
    let achieved = achieved_sparsity(&params);
    if let Some(s) = compression.sparsity() {
        if achieved + 1e-12 < s {
            return Err(Error::Estimation(format!(
                "pruning reached sparsity {achieved}, below the requested {s}"
            )));
        }
    }
    Ok(CompressedModel {
        base_model_id: base_model_id.to_string(),
        compression: compression.clone(),
        distinct_values_per_tensor: distinct_values_per_tensor(&params),
        achieved_sparsity: achieved,
        spec,
        params,
        distill_log,
    })
}
