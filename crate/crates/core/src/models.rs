//! Small differentiable classifiers trained from scratch.
//!
//! Two architectures are supported: multinomial logistic regression
//! (`softmax_linear`) and a fully connected multilayer perceptron (`mlp`).
//! Gradients are derived by hand and validated against central finite
//! differences with [`gradient_check`].

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{u32_of, LabeledDataset};
use crate::error::{Error, Result};

const MGPM_MAGIC: &[u8; 4] = b"MGPM";
const PREDICT_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    SoftmaxLinear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    #[serde(default)]
    pub layer_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    pub n_features: usize,
    pub n_classes: usize,
}

impl ModelSpec {
    pub fn softmax_linear(n_features: usize, n_classes: usize) -> Self {
        Self {
            architecture: Architecture::SoftmaxLinear,
            layer_widths: Vec::new(),
            activation: Activation::Relu,
            n_features,
            n_classes,
        }
    }

    pub fn mlp(
        n_features: usize,
        layer_widths: Vec<usize>,
        activation: Activation,
        n_classes: usize,
    ) -> Self {
        Self {
            architecture: Architecture::Mlp,
            layer_widths,
            activation,
            n_features,
            n_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0 || self.n_classes == 0 {
            return Err(Error::Config(
                "n_features and n_classes must be positive".into(),
            ));
        }
        match self.architecture {
            Architecture::Mlp if self.layer_widths.is_empty() => Err(Error::Config(
                "mlp requires at least one hidden layer".into(),
            )),
            Architecture::Mlp if self.layer_widths.contains(&0) => {
                Err(Error::Config("hidden layer widths must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// `(fan_in, fan_out)` of every affine layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.n_features];
        if self.architecture == Architecture::Mlp {
            widths.extend(&self.layer_widths);
        }
        widths.push(self.n_classes);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    fn check_data(&self, data: &LabeledDataset) -> Result<()> {
        if data.n_features() != self.n_features {
            return Err(Error::Dimension {
                what: "feature width",
                expected: self.n_features,
                actual: data.n_features(),
            });
        }
        if data.n_classes() != self.n_classes {
            return Err(Error::Dimension {
                what: "class count",
                expected: self.n_classes,
                actual: data.n_classes(),
            });
        }
        Ok(())
    }
}

/// A named, row-major tensor of rank 1 (bias) or 2 (weight).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn is_bias(&self) -> bool {
        self.name.ends_with(".bias")
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn matrix(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.shape[0], self.shape[1]), &self.data)
            .expect("weight tensor shape")
    }
}

/// Ordered model parameters: `layer{i}.weight` (`[out, in]`) followed by
/// `layer{i}.bias` (`[out]`) for every affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn from_tensors(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        let mut tensors = Vec::new();
        for (l, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
            tensors.push(Tensor::zeros(format!("layer{l}.weight"), vec![fan_out, fan_in]));
            tensors.push(Tensor::zeros(format!("layer{l}.bias"), vec![fan_out]));
        }
        Self { tensors }
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(spec: &ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let mut params = Self::zeros(spec);
        for t in params.tensors.iter_mut().filter(|t| !t.is_bias()) {
            let limit = (6.0 / (t.shape[0] + t.shape[1]) as f64).sqrt();
            for v in &mut t.data {
                *v = rng.random_range(-limit..limit);
            }
        }
        params
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn n_entries(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Checks tensor names and shapes against `spec` and that every entry is finite.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let reference = Params::zeros(spec);
        if reference.tensors.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, found {}",
                reference.tensors.len(),
                self.tensors.len()
            )));
        }
        for (want, got) in reference.tensors.iter().zip(&self.tensors) {
            if want.name != got.name || want.shape != got.shape || got.data.len() != want.len() {
                return Err(Error::Shape(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    got.name, got.shape, want.name, want.shape
                )));
            }
            if got.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Shape(format!("tensor {} has non-finite entries", got.name)));
            }
        }
        Ok(())
    }

    /// Round every entry to the nearest `f32`, the precision used on disk.
    pub fn to_storage_precision(&self) -> Self {
        let mut out = self.clone();
        for t in &mut out.tensors {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
        out
    }

    /// Write in the `MGPM` format. Entries are narrowed to `f32`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MGPM_MAGIC)?;
        w.write_all(&u32_of(self.tensors.len())?.to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&u32_of(t.name.len())?.to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&u32_of(t.shape.len())?.to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&u32_of(d)?.to_le_bytes())?;
            }
            for &v in &t.data {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MGPM_MAGIC {
            return Err(Error::Format("missing MGPM magic".into()));
        }
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name =
                String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u32(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let mut buf = vec![0u8; 4 * len];
            r.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            tensors.push(Tensor { name, shape, data });
        }
        Ok(Self { tensors })
    }

    fn axpy_momentum(&mut self, grads: &Params, velocity: &mut Params, lr: f64, momentum: f64) {
        for ((p, g), v) in self
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(velocity.tensors.iter_mut())
        {
            for ((pv, gv), vv) in p.data.iter_mut().zip(&g.data).zip(v.data.iter_mut()) {
                *vv = momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

const INIT_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointSelection {
    #[default]
    BestEvalAccuracy,
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Clamped to the training-set size at call time.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub checkpoint_selection: CheckpointSelection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 0,
            checkpoint_selection: CheckpointSelection::BestEvalAccuracy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub eval_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub params: Params,
    pub train_log: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub checkpoint_epoch: usize,
}

impl TrainedModel {
    pub fn from_params(spec: ModelSpec, params: Params) -> Result<Self> {
        params.validate(&spec)?;
        Ok(Self {
            spec,
            params,
            train_log: Vec::new(),
            checkpoint_epoch: 0,
        })
    }

    /// Eval accuracy logged at the checkpoint epoch, if any.
    pub fn checkpoint_accuracy(&self) -> Option<f64> {
        self.train_log
            .iter()
            .find(|r| r.epoch == self.checkpoint_epoch)
            .and_then(|r| r.eval_accuracy)
    }
}

/// Index of the best accuracy; ties resolve to the earliest entry.
pub fn select_checkpoint(accuracies: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &a) in accuracies.iter().enumerate() {
        match best {
            Some((_, b)) if a <= b => {}
            _ => best = Some((i, a)),
        }
    }
    best.map(|(i, _)| i)
}

pub(crate) struct Forward {
    /// Layer inputs; `acts[0]` is the batch, `acts[l]` the post-activation
    /// output of hidden layer `l - 1`.
    acts: Vec<Array2<f64>>,
    pub logits: Array2<f64>,
}

pub(crate) fn forward(spec: &ModelSpec, params: &Params, x: Array2<f64>) -> Forward {
    let n_layers = params.tensors.len() / 2;
    let mut acts = vec![x];
    let mut logits = None;
    for l in 0..n_layers {
        let w = params.tensors[2 * l].matrix();
        let b = &params.tensors[2 * l + 1].data;
        let mut z = acts[l].dot(&w.t());
        for mut row in z.rows_mut() {
            for (zv, bv) in row.iter_mut().zip(b) {
                *zv += bv;
            }
        }
        if l + 1 == n_layers {
            logits = Some(z);
        } else {
            match spec.activation {
                Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
                Activation::Tanh => z.mapv_inplace(f64::tanh),
            }
            acts.push(z);
        }
    }
    Forward {
        acts,
        logits: logits.expect("at least one layer"),
    }
}

/// Gradients of a scalar loss given its gradient with respect to the logits.
pub(crate) fn backward(
    spec: &ModelSpec,
    params: &Params,
    cache: &Forward,
    dlogits: Array2<f64>,
) -> Params {
    let n_layers = params.tensors.len() / 2;
    let mut grads = params.clone();
    let mut dz = dlogits;
    for l in (0..n_layers).rev() {
        let a_prev = &cache.acts[l];
        let dw = dz.t().dot(a_prev);
        let db = dz.sum_axis(Axis(0));
        grads.tensors[2 * l].data = dw.iter().copied().collect();
        grads.tensors[2 * l + 1].data = db.to_vec();
        if l > 0 {
            let w = params.tensors[2 * l].matrix();
            let mut da = dz.dot(&w);
            let a = &cache.acts[l];
            match spec.activation {
                Activation::Relu => da.zip_mut_with(a, |d, &av| {
                    if av <= 0.0 {
                        *d = 0.0
                    }
                }),
                Activation::Tanh => da.zip_mut_with(a, |d, &av| *d *= 1.0 - av * av),
            }
            dz = da;
        }
    }
    grads
}

pub(crate) fn log_softmax_row(row: ndarray::ArrayView1<'_, f64>, temperature: f64) -> Array1<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
    let lse = max
        + row
            .iter()
            .map(|&v| (v / temperature - max).exp())
            .sum::<f64>()
            .ln();
    row.mapv(|v| v / temperature - lse)
}

/// Summed cross-entropy over the batch and its gradient w.r.t. the logits,
/// scaled by `scale`.
pub(crate) fn cross_entropy(
    logits: &Array2<f64>,
    labels: impl Iterator<Item = u32>,
    scale: f64,
    dlogits: &mut Array2<f64>,
) -> f64 {
    let mut total = 0.0;
    for ((row, mut drow), y) in logits.rows().into_iter().zip(dlogits.rows_mut()).zip(labels) {
        let logp = log_softmax_row(row, 1.0);
        total -= logp[y as usize];
        for (c, d) in drow.iter_mut().enumerate() {
            let g = logp[c].exp() - if c == y as usize { 1.0 } else { 0.0 };
            *d += scale * g;
        }
    }
    total
}

pub(crate) fn gather_rows(data: &LabeledDataset, rows: &[usize]) -> Array2<f64> {
    let d = data.n_features();
    let mut x = Array2::zeros((rows.len(), d));
    for (r, &i) in rows.iter().enumerate() {
        for (dst, &src) in x.row_mut(r).iter_mut().zip(data.row(i)) {
            *dst = src as f64;
        }
    }
    x
}

pub(crate) struct SgdSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

/// Mini-batch SGD with momentum over `data`, reshuffled each epoch.
///
/// `head(rows, logits, dlogits)` accumulates the gradient of the mean batch
/// loss into `dlogits` and returns the summed batch loss. `frozen` entries
/// are held at zero. `on_epoch(epoch, params, mean_loss)` runs after every
/// epoch (1-based).
pub(crate) fn run_sgd<H, E>(
    spec: &ModelSpec,
    params: &mut Params,
    data: &LabeledDataset,
    settings: &SgdSettings,
    frozen: Option<&[Vec<bool>]>,
    mut head: H,
    mut on_epoch: E,
) -> Result<()>
where
    H: FnMut(&[usize], &Array2<f64>, &mut Array2<f64>) -> f64,
    E: FnMut(usize, &Params, f64) -> Result<()>,
{
    let n = data.len();
    if n == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    let batch_size = settings.batch_size.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut velocity = Params::zeros(spec);
    for epoch in 1..=settings.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for rows in order.chunks(batch_size) {
            let cache = forward(spec, params, gather_rows(data, rows));
            let mut dlogits = Array2::zeros(cache.logits.raw_dim());
            let loss = head(rows, &cache.logits, &mut dlogits);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            epoch_loss += loss;
            let mut grads = backward(spec, params, &cache, dlogits);
            if let Some(mask) = frozen {
                zero_masked(&mut grads, mask);
            }
            params.axpy_momentum(&grads, &mut velocity, settings.learning_rate, settings.momentum);
            if let Some(mask) = frozen {
                zero_masked(params, mask);
            }
        }
        let mean = epoch_loss / n as f64;
        if !mean.is_finite() || params.tensors.iter().any(|t| t.data.iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence { epoch });
        }
        on_epoch(epoch, params, mean)?;
    }
    Ok(())
}

fn zero_masked(params: &mut Params, mask: &[Vec<bool>]) {
    for (t, m) in params.tensors.iter_mut().zip(mask) {
        for (v, &frozen) in t.data.iter_mut().zip(m) {
            if frozen {
                *v = 0.0;
            }
        }
    }
}

/// Train a classifier with softmax cross-entropy and momentum SGD.
///
/// With [`CheckpointSelection::BestEvalAccuracy`] the returned parameters are
/// those of the epoch with the highest `eval_set` accuracy, earliest on ties.
pub fn train(
    spec: &ModelSpec,
    train_set: &LabeledDataset,
    eval_set: &LabeledDataset,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    spec.validate()?;
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    spec.check_data(train_set)?;
    let select_best = config.checkpoint_selection == CheckpointSelection::BestEvalAccuracy;
    if select_best && eval_set.is_empty() {
        return Err(Error::Config(
            "best_eval_accuracy checkpointing needs a non-empty eval set".into(),
        ));
    }
    if !eval_set.is_empty() {
        spec.check_data(eval_set)?;
    }

    let mut params = Params::init(spec, config.seed);
    let settings = SgdSettings {
        epochs: config.epochs,
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
        momentum: config.momentum,
        seed: config.seed,
    };
    let labels = train_set.labels();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Params)> = None;

    run_sgd(
        spec,
        &mut params,
        train_set,
        &settings,
        None,
        |rows, logits, dlogits| {
            let scale = 1.0 / rows.len() as f64;
            cross_entropy(logits, rows.iter().map(|&i| labels[i]), scale, dlogits)
        },
        |epoch, params, loss| {
            let eval_accuracy = if eval_set.is_empty() {
                None
            } else {
                Some(accuracy_of(spec, params, eval_set)?)
            };
            if select_best {
                let acc = eval_accuracy.unwrap_or(f64::NEG_INFINITY);
                if best.as_ref().is_none_or(|(_, b, _)| acc > *b) {
                    best = Some((epoch, acc, params.clone()));
                }
            }
            log.push(EpochRecord {
                epoch,
                loss,
                eval_accuracy,
            });
            Ok(())
        },
    )?;

    let (checkpoint_epoch, params) = match best {
        Some((epoch, _, p)) => (epoch, p),
        None => (config.epochs, params),
    };
    Ok(TrainedModel {
        spec: spec.clone(),
        params,
        train_log: log,
        checkpoint_epoch,
    })
}

/// Class scores for every row of `features`.
pub fn logits(spec: &ModelSpec, params: &Params, features: &Array2<f32>) -> Result<Array2<f64>> {
    if features.ncols() != spec.n_features {
        return Err(Error::Dimension {
            what: "feature width",
            expected: spec.n_features,
            actual: features.ncols(),
        });
    }
    let mut out = Array2::zeros((features.nrows(), spec.n_classes));
    for (start, chunk) in (0..features.nrows())
        .step_by(PREDICT_CHUNK)
        .zip(features.axis_chunks_iter(Axis(0), PREDICT_CHUNK))
    {
        let x = chunk.mapv(|v| v as f64);
        let f = forward(spec, params, x);
        out.slice_mut(ndarray::s![start..start + chunk.nrows(), ..])
            .assign(&f.logits);
    }
    Ok(out)
}

/// Argmax of the class scores, ties broken toward the smallest class index.
pub fn predict_with(spec: &ModelSpec, params: &Params, features: &Array2<f32>) -> Result<Vec<u32>> {
    let z = logits(spec, params, features)?;
    Ok(z.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best as u32
        })
        .collect())
}

pub fn predict(model: &TrainedModel, features: &Array2<f32>) -> Result<Vec<u32>> {
    predict_with(&model.spec, &model.params, features)
}

pub fn correctness_with(
    spec: &ModelSpec,
    params: &Params,
    dataset: &LabeledDataset,
) -> Result<Vec<bool>> {
    let preds = predict_with(spec, params, dataset.features())?;
    Ok(preds
        .iter()
        .zip(dataset.labels())
        .map(|(p, y)| p == y)
        .collect())
}

/// Element `i` is whether the model classifies example `i` correctly.
pub fn correctness(model: &TrainedModel, dataset: &LabeledDataset) -> Result<Vec<bool>> {
    correctness_with(&model.spec, &model.params, dataset)
}

pub fn accuracy(model: &TrainedModel, dataset: &LabeledDataset) -> Result<f64> {
    accuracy_of(&model.spec, &model.params, dataset)
}

fn accuracy_of(spec: &ModelSpec, params: &Params, dataset: &LabeledDataset) -> Result<f64> {
    let c = correctness_with(spec, params, dataset)?;
    Ok(c.iter().filter(|&&b| b).count() as f64 / c.len().max(1) as f64)
}

/// Mean cross-entropy over a batch and its gradient.
pub fn loss_and_gradient(
    spec: &ModelSpec,
    params: &Params,
    features: &Array2<f64>,
    labels: &[u32],
) -> (f64, Params) {
    let cache = forward(spec, params, features.clone());
    let mut dlogits = Array2::zeros(cache.logits.raw_dim());
    let scale = 1.0 / labels.len() as f64;
    let loss = cross_entropy(&cache.logits, labels.iter().copied(), scale, &mut dlogits) * scale;
    (loss, backward(spec, params, &cache, dlogits))
}

fn mean_loss(spec: &ModelSpec, params: &Params, features: &Array2<f64>, labels: &[u32]) -> f64 {
    let cache = forward(spec, params, features.clone());
    let mut scratch = Array2::zeros(cache.logits.raw_dim());
    cross_entropy(&cache.logits, labels.iter().copied(), 0.0, &mut scratch) / labels.len() as f64
}

pub const GRADIENT_CHECK_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale.
pub const GRADIENT_CHECK_FLOOR: f64 = 1e-6;

/// Maximum relative error between analytic gradients and central finite
/// differences over every parameter entry.
///
/// The relative error of an entry is `|g - fd| / max(|g|, |fd|, 1e-6)`.
pub fn gradient_check(spec: &ModelSpec, params: &Params, features: &Array2<f64>, labels: &[u32]) -> f64 {
    let (_, analytic) = loss_and_gradient(spec, params, features, labels);
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for t in 0..params.tensors.len() {
        for k in 0..params.tensors[t].data.len() {
            let orig = params.tensors[t].data[k];
            probe.tensors[t].data[k] = orig + GRADIENT_CHECK_STEP;
            let up = mean_loss(spec, &probe, features, labels);
            probe.tensors[t].data[k] = orig - GRADIENT_CHECK_STEP;
            let down = mean_loss(spec, &probe, features, labels);
            probe.tensors[t].data[k] = orig;
            let numeric = (up - down) / (2.0 * GRADIENT_CHECK_STEP);
            let g = analytic.tensors[t].data[k];
            let denom = g.abs().max(numeric.abs()).max(GRADIENT_CHECK_FLOOR);
            worst = worst.max((g - numeric).abs() / denom);
        }
    }
    worst
}

/// Smallest absolute hidden-layer pre-activation over a batch; used to keep
/// finite-difference probes away from ReLU kinks. Infinite for
/// `softmax_linear`.
pub fn preactivation_margin(spec: &ModelSpec, params: &Params, features: &Array2<f64>) -> f64 {
    let n_layers = params.tensors.len() / 2;
    let mut a = features.clone();
    let mut margin = f64::INFINITY;
    for l in 0..n_layers.saturating_sub(1) {
        let w = params.tensors[2 * l].matrix();
        let b = &params.tensors[2 * l + 1].data;
        let mut z = a.dot(&w.t());
        for mut row in z.rows_mut() {
            for (zv, bv) in row.iter_mut().zip(b) {
                *zv += bv;
            }
        }
        margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
        a = match spec.activation {
            Activation::Relu => z.mapv(|v| v.max(0.0)),
            Activation::Tanh => z.mapv(f64::tanh),
        };
    }
    margin
}
