//! Labeled datasets: the CIFAR-10 binary loader, a synthetic long-tail
//! generator, subset restriction and the `MGDS` on-disk format.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CIFAR10_RECORD_BYTES: usize = 3073;
pub const CIFAR10_PIXELS: usize = 3072;
pub const CIFAR10_CLASSES: usize = 10;

const MGDS_MAGIC: &[u8; 4] = b"MGDS";

/// An ordered collection of `(feature vector, class label)` examples.
///
/// Datasets built from a source carry `ids` equal to their positions.
/// [`LabeledDataset::restrict`] keeps the ids of the parent, so a subset
/// can always be mapped back onto the full set.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Array2<f32>,
    labels: Vec<u32>,
    n_classes: usize,
    ids: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(features: Array2<f32>, labels: Vec<u32>, n_classes: usize) -> Result<Self> {
        let ids = (0..labels.len()).collect();
        Self::with_ids(features, labels, n_classes, ids)
    }

    fn with_ids(
        features: Array2<f32>,
        labels: Vec<u32>,
        n_classes: usize,
        ids: Vec<usize>,
    ) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::Config("n_classes must be positive".into()));
        }
        if features.nrows() != labels.len() {
            return Err(Error::Dimension {
                what: "feature rows vs labels",
                expected: labels.len(),
                actual: features.nrows(),
            });
        }
        if ids.len() != labels.len() {
            return Err(Error::Dimension {
                what: "ids vs labels",
                expected: labels.len(),
                actual: ids.len(),
            });
        }
        if let Some((index, &label)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= n_classes)
        {
            return Err(Error::InvalidLabel { index, label });
        }
        Ok(Self {
            features,
            labels,
            n_classes,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn features(&self) -> &Array2<f32> {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f32> {
        self.features.row(i)
    }

    /// Sub-dataset of the examples whose `keep` flag is set, in original
    /// order and with original ids.
    pub fn restrict(&self, keep: &[bool]) -> Result<Self> {
        if keep.len() != self.len() {
            return Err(Error::Dimension {
                what: "restriction mask",
                expected: self.len(),
                actual: keep.len(),
            });
        }
        let rows: Vec<usize> = (0..self.len()).filter(|&i| keep[i]).collect();
        Ok(Self {
            features: self.features.select(Axis(0), &rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            ids: rows.iter().map(|&i| self.ids[i]).collect(),
        })
    }

    /// Concatenate datasets with the same feature width and class count.
    /// Ids of the result are positions in the concatenation.
    pub fn concat(parts: &[LabeledDataset]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("nothing to concatenate".into()))?;
        for p in parts {
            if p.n_features() != first.n_features() {
                return Err(Error::Dimension {
                    what: "feature width",
                    expected: first.n_features(),
                    actual: p.n_features(),
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|p| p.features.view()).collect();
        let features = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let labels = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
        Self::new(features, labels, first.n_classes)
    }

    /// Per-feature standardization to zero mean and unit variance.
    /// Constant features are centered only.
    pub fn standardized(&self) -> Self {
        let mut features = self.features.clone();
        let n = features.nrows().max(1) as f64;
        for mut col in features.columns_mut() {
            let mean = col.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = col.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
            col.mapv_inplace(|v| ((v as f64 - mean) / scale) as f32);
        }
        Self {
            features,
            labels: self.labels.clone(),
            n_classes: self.n_classes,
            ids: self.ids.clone(),
        }
    }
}

/// Load CIFAR-10 binary records from `path`, reading at most `limit` of them.
pub fn load_cifar10(path: impl AsRef<Path>, limit: Option<usize>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let mut file = File::open(path)?;
    let size = file.metadata()?.len() as usize;
    if size % CIFAR10_RECORD_BYTES != 0 {
        return Err(Error::MalformedFile {
            path: path.to_path_buf(),
            reason: format!("size {size} is not a multiple of {CIFAR10_RECORD_BYTES}"),
        });
    }
    let records = limit.map_or(size / CIFAR10_RECORD_BYTES, |l| {
        l.min(size / CIFAR10_RECORD_BYTES)
    });
    let mut bytes = vec![0u8; records * CIFAR10_RECORD_BYTES];
    file.read_exact(&mut bytes)?;
    parse_cifar10(&bytes).map_err(|e| match e {
        Error::MalformedFile { reason, .. } => Error::MalformedFile {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })
}

/// Decode an in-memory CIFAR-10 batch. Pixels are scaled by 1/255.
pub fn parse_cifar10(bytes: &[u8]) -> Result<LabeledDataset> {
    if bytes.len() % CIFAR10_RECORD_BYTES != 0 {
        return Err(Error::MalformedFile {
            path: "<memory>".into(),
            reason: format!(
                "size {} is not a multiple of {CIFAR10_RECORD_BYTES}",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR10_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR10_PIXELS);
    for (index, record) in bytes.chunks_exact(CIFAR10_RECORD_BYTES).enumerate() {
        let label = record[0];
        if label as usize >= CIFAR10_CLASSES {
            return Err(Error::InvalidLabel {
                index,
                label: label as u32,
            });
        }
        labels.push(label as u32);
        pixels.extend(record[1..].iter().map(|&b| b as f32 / 255.0));
    }
    let features = Array2::from_shape_vec((n, CIFAR10_PIXELS), pixels)
        .map_err(|e| Error::Shape(e.to_string()))?;
    LabeledDataset::new(features, labels, CIFAR10_CLASSES)
}

/// Re-encode a dataset as CIFAR-10 records. Inverse of [`parse_cifar10`] for
/// datasets produced by it.
pub fn to_cifar10_bytes(dataset: &LabeledDataset) -> Result<Vec<u8>> {
    if dataset.n_features() != CIFAR10_PIXELS {
        return Err(Error::Dimension {
            what: "CIFAR-10 pixel count",
            expected: CIFAR10_PIXELS,
            actual: dataset.n_features(),
        });
    }
    let mut out = Vec::with_capacity(dataset.len() * CIFAR10_RECORD_BYTES);
    for (i, &label) in dataset.labels().iter().enumerate() {
        if label as usize >= CIFAR10_CLASSES {
            return Err(Error::InvalidLabel { index: i, label });
        }
        out.push(label as u8);
        out.extend(
            dataset
                .row(i)
                .iter()
                .map(|&v| (v as f64 * 255.0).round().clamp(0.0, 255.0) as u8),
        );
    }
    Ok(out)
}

/// Parameters of the synthetic long-tail mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LongTailConfig {
    pub n_subpopulations: usize,
    /// Zipf exponent over subpopulation frequencies; 0 gives a uniform mixture.
    pub frequency_exponent: f64,
    pub n_classes: usize,
    pub n_features: usize,
    pub cluster_spread: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub label_noise: f64,
}

impl LongTailConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_classes == 0 || self.n_features == 0 {
            return fail("n_classes and n_features must be positive");
        }
        if self.n_subpopulations < self.n_classes {
            return fail("n_subpopulations must be at least n_classes");
        }
        if !(self.frequency_exponent >= 0.0 && self.frequency_exponent.is_finite()) {
            return fail("frequency_exponent must be finite and non-negative");
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return fail("cluster_spread must be positive");
        }
        if self.train_size < self.n_classes || self.test_size < self.n_classes {
            return fail("train_size and test_size must be at least n_classes");
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return fail("label_noise must lie in [0, 1)");
        }
        Ok(())
    }

    /// Mixture weights, `w_k ∝ (k + 1)^(-exponent)`, normalized to sum to 1.
    pub fn subpopulation_weights(&self) -> Vec<f64> {
        let raw: Vec<f64> = (1..=self.n_subpopulations)
            .map(|k| (k as f64).powf(-self.frequency_exponent))
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect()
    }

    /// Class of subpopulation `k` (round-robin over classes).
    pub fn subpopulation_label(&self, k: usize) -> u32 {
        (k % self.n_classes) as u32
    }
}

/// A draw from the long-tail generator with the subpopulation of every
/// example exposed for diagnostics.
#[derive(Debug, Clone)]
pub struct LongTailDraw {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub train_subpopulations: Vec<usize>,
    pub test_subpopulations: Vec<usize>,
    pub centers: Array2<f64>,
}

pub fn generate_longtail(
    config: &LongTailConfig,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let draw = generate_longtail_detailed(config, seed)?;
    Ok((draw.train, draw.test))
}

pub fn generate_longtail_detailed(config: &LongTailConfig, seed: u64) -> Result<LongTailDraw> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.n_features;
    let centers = Array2::from_shape_fn((config.n_subpopulations, d), |_| rng.random::<f64>());
    let mixture = WeightedIndex::new(config.subpopulation_weights())
        .map_err(|e| Error::Config(e.to_string()))?;

    let draw = |n: usize, rng: &mut ChaCha8Rng| -> Result<(LabeledDataset, Vec<usize>)> {
        let mut features = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        let mut subpops = Vec::with_capacity(n);
        for _ in 0..n {
            let k = mixture.sample(rng);
            for f in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                features.push((centers[[k, f]] + config.cluster_spread * z) as f32);
            }
            let coin: f64 = rng.random();
            let resampled = rng.random_range(0..config.n_classes) as u32;
            labels.push(if coin < config.label_noise {
                resampled
            } else {
                config.subpopulation_label(k)
            });
            subpops.push(k);
        }
        let features =
            Array2::from_shape_vec((n, d), features).map_err(|e| Error::Shape(e.to_string()))?;
        Ok((LabeledDataset::new(features, labels, config.n_classes)?, subpops))
    };

    let (train, train_subpopulations) = draw(config.train_size, &mut rng)?;
    let (test, test_subpopulations) = draw(config.test_size, &mut rng)?;
    Ok(LongTailDraw {
        train,
        test,
        train_subpopulations,
        test_subpopulations,
        centers,
    })
}

/// Serialize in the `MGDS` format: magic, `u32` example/feature/class counts,
/// `u32` labels, then row-major `f32` features, all little-endian.
pub fn write_mgds<W: Write>(dataset: &LabeledDataset, mut w: W) -> Result<()> {
    w.write_all(MGDS_MAGIC)?;
    for v in [dataset.len(), dataset.n_features(), dataset.n_classes()] {
        w.write_all(&u32_of(v)?.to_le_bytes())?;
    }
    for &l in dataset.labels() {
        w.write_all(&l.to_le_bytes())?;
    }
    for &v in dataset.features().iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_mgds<R: Read>(mut r: R) -> Result<LabeledDataset> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[..4] != MGDS_MAGIC {
        return Err(Error::Format("missing MGDS magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
    let (n, d, c) = (word(4), word(8), word(12));
    let mut buf = vec![0u8; 4 * n];
    r.read_exact(&mut buf)?;
    let labels = buf
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let mut buf = vec![0u8; 4 * n * d];
    r.read_exact(&mut buf)?;
    let features = buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let features =
        Array2::from_shape_vec((n, d), features).map_err(|e| Error::Shape(e.to_string()))?;
    LabeledDataset::new(features, labels, c)
}

pub(crate) fn u32_of(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn tiny() -> LabeledDataset {
        LabeledDataset::new(array![[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]], vec![0, 1, 0], 2).unwrap()
    }

    fn cifar_bytes(n: usize, seed: u64) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for _ in 0..n {
            out.push(rng.random_range(0..10u8));
            out.extend((0..CIFAR10_PIXELS).map(|_| rng.random::<u8>()));
        }
        out
    }

    fn longtail(exponent: f64, spread: f64, noise: f64, train: usize) -> LongTailConfig {
        LongTailConfig {
            n_subpopulations: 6,
            frequency_exponent: exponent,
            n_classes: 3,
            n_features: 4,
            cluster_spread: spread,
            train_size: train,
            test_size: 200,
            label_noise: noise,
        }
    }

    #[test]
    fn cifar_record_count_and_width() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        std::fs::write(&path, cifar_bytes(100, 1)).unwrap();
        let ds = load_cifar10(&path, None).unwrap();
        assert_eq!(ds.len(), 100);
        assert_eq!(ds.n_features(), 3072);
        assert_eq!(load_cifar10(&path, Some(7)).unwrap().len(), 7);
        assert_eq!(load_cifar10(&path, Some(500)).unwrap().len(), 100);
    }

    #[test]
    fn cifar_malformed_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        let mut bytes = cifar_bytes(100, 2);
        bytes.push(0);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_cifar10(&path, None),
            Err(Error::MalformedFile { .. })
        ));
    }

    #[test]
    fn cifar_invalid_label_names_record() {
        let mut bytes = cifar_bytes(10, 3);
        bytes[7 * CIFAR10_RECORD_BYTES] = 12;
        match parse_cifar10(&bytes) {
            Err(Error::InvalidLabel { index, label }) => {
                assert_eq!((index, label), (7, 12));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cifar_round_trip() {
        let bytes = cifar_bytes(20, 4);
        let ds = parse_cifar10(&bytes).unwrap();
        assert_eq!(to_cifar10_bytes(&ds).unwrap(), bytes);
        assert!(ds.features().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn restrict_examples() {
        let ds = tiny();
        assert_eq!(ds.restrict(&[true; 3]).unwrap(), ds);
        assert!(ds.restrict(&[false; 3]).unwrap().is_empty());
        let sub = ds.restrict(&[true, false, true]).unwrap();
        assert_eq!(sub.ids(), &[0, 2]);
        assert_eq!(sub.labels(), &[0, 0]);
        assert_eq!(sub.row(1).to_vec(), vec![4.0, 5.0]);
        assert!(matches!(
            ds.restrict(&[true]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn restrict_of_restrict_keeps_root_ids() {
        let ds = tiny();
        let sub = ds.restrict(&[false, true, true]).unwrap();
        let subsub = sub.restrict(&[false, true]).unwrap();
        assert_eq!(subsub.ids(), &[2]);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let err = LabeledDataset::new(array![[0.0f32], [1.0]], vec![0, 2], 2).unwrap_err();
        assert!(matches!(err, Error::InvalidLabel { index: 1, label: 2 }));
    }

    #[test]
    fn standardized_features_have_unit_scale() {
        let ds = tiny().standardized();
        for col in ds.features().columns() {
            let mean: f32 = col.iter().sum::<f32>() / 3.0;
            assert!(mean.abs() < 1e-6);
        }
    }

    #[test]
    fn zero_exponent_is_uniform() {
        let w = longtail(0.0, 0.1, 0.0, 100).subpopulation_weights();
        for v in &w {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
        let w = longtail(1.5, 0.1, 0.0, 100).subpopulation_weights();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.windows(2).all(|p| p[0] > p[1]));
    }

    #[test]
    fn generator_is_deterministic() {
        let cfg = longtail(1.0, 0.2, 0.1, 300);
        let (a_train, a_test) = generate_longtail(&cfg, 1).unwrap();
        let (b_train, b_test) = generate_longtail(&cfg, 1).unwrap();
        assert_eq!(a_train, b_train);
        assert_eq!(a_test, b_test);
        let (c_train, _) = generate_longtail(&cfg, 2).unwrap();
        assert_ne!(a_train, c_train);
    }

    #[test]
    fn degenerate_config_rejected() {
        let mut cfg = longtail(1.0, 0.2, 0.0, 100);
        cfg.n_subpopulations = 2;
        assert!(matches!(generate_longtail(&cfg, 0), Err(Error::Config(_))));
        let mut cfg = longtail(1.0, 0.2, 0.0, 100);
        cfg.train_size = 2;
        assert!(matches!(generate_longtail(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn tight_clusters_are_one_nn_separable() {
        let cfg = longtail(1.0, 1e-6, 0.0, 400);
        let draw = generate_longtail_detailed(&cfg, 9).unwrap();
        let seen: std::collections::HashSet<_> = draw.train_subpopulations.iter().collect();
        for i in 0..draw.test.len() {
            if !seen.contains(&draw.test_subpopulations[i]) {
                continue;
            }
            let q = draw.test.row(i);
            let nearest = (0..draw.train.len())
                .min_by(|&a, &b| {
                    let da: f32 = (&draw.train.row(a) - &q).mapv(|v| v * v).sum();
                    let db: f32 = (&draw.train.row(b) - &q).mapv(|v| v * v).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(draw.train.labels()[nearest], draw.test.labels()[i]);
        }
    }

    #[test]
    fn subpopulation_frequencies_match_zipf() {
        let cfg = longtail(1.5, 0.1, 0.0, 20_000);
        let draw = generate_longtail_detailed(&cfg, 5).unwrap();
        let weights = cfg.subpopulation_weights();
        let mut counts = vec![0usize; cfg.n_subpopulations];
        for &k in &draw.train_subpopulations {
            counts[k] += 1;
        }
        let n = cfg.train_size as f64;
        let chi2: f64 = counts
            .iter()
            .zip(&weights)
            .map(|(&o, &w)| (o as f64 - n * w).powi(2) / (n * w))
            .sum();
        // 5 degrees of freedom; the 0.999 quantile is 20.5
        assert!(chi2 < 20.5, "chi-square {chi2}");
    }

    #[test]
    fn mgds_round_trip() {
        let cfg = longtail(1.0, 0.3, 0.05, 50);
        let (train, _) = generate_longtail(&cfg, 3).unwrap();
        let mut buf = Vec::new();
        write_mgds(&train, &mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 4 * 50 + 4 * 50 * 4);
        assert_eq!(&buf[..4], b"MGDS");
        assert_eq!(read_mgds(&buf[..]).unwrap(), train);
    }

    proptest! {
        #[test]
        fn restrict_selects_exactly_the_mask(mask in proptest::collection::vec(any::<bool>(), 0..40)) {
            let n = mask.len();
            let ds = LabeledDataset::new(
                Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f32),
                vec![0; n],
                1,
            ).unwrap();
            let sub = ds.restrict(&mask).unwrap();
            let expected: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
            prop_assert_eq!(sub.len(), mask.iter().filter(|&&b| b).count());
            prop_assert_eq!(sub.ids(), &expected[..]);
        }
    }
}
