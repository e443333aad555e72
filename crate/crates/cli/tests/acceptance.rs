//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run with `cargo test -p memgauge --test acceptance`. Set `CIFAR10_DIR` to
//! a directory of real CIFAR-10 binary batches to include them in the
//! round-trip check.

use std::collections::BTreeSet;
use std::io::Cursor;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use memgauge::commands::{MethodAnalysis, Overview};
use memgauge_core::analysis::{ttest_two_sample, TTestVariant};
use memgauge_core::compression::{
    compress, prune_magnitude, quantize_uniform, CompressionSpec, DistillConfig, LossWeighting,
    PruneScope,
};
use memgauge_core::datasets::{load_cifar10, parse_cifar10, to_cifar10_bytes, LabeledDataset};
use memgauge_core::influence::{
    estimate_influence, mean_received_influence, memorization, run_trials, sample_masks,
    InfluenceMatrix, OneNearestNeighbor, Target, TrialRecord, TrialStatus,
};
use memgauge_core::models::{
    gradient_check, preactivation_margin, Activation, ModelSpec, Params, TrainedModel,
};
use memgauge_core::Error;
use memgauge_oracles as oracles;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn dataset(x: &[Vec<f64>], y: &[usize], n_classes: usize) -> LabeledDataset {
    let d = x[0].len();
    let flat: Vec<f32> = x.iter().flatten().map(|&v| v as f32).collect();
    LabeledDataset::new(
        Array2::from_shape_vec((x.len(), d), flat).unwrap(),
        y.iter().map(|&v| v as u32).collect(),
        n_classes,
    )
    .unwrap()
}

fn as_rows(m: &InfluenceMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// Largest absolute difference over entries defined in both matrices; fails
/// if definedness differs.
fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for (i, (ra, rb)) in a.iter().zip(b).enumerate() {
        for (j, (&x, &y)) in ra.iter().zip(rb).enumerate() {
            match (x.is_nan(), y.is_nan()) {
                (true, true) => {}
                (false, false) => worst = worst.max((x - y).abs()),
                _ => return Err(format!("entry ({i},{j}) defined on one side only: {x} vs {y}")),
            }
        }
    }
    Ok(worst)
}

const ENUM_TRIALS: usize = 20_000;
const ENUM_P: f64 = 0.7;

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let point = |rng: &mut ChaCha8Rng| vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
    let train_x: Vec<Vec<f64>> = (0..10).map(|_| point(&mut rng)).collect();
    let train_y: Vec<usize> = (0..10).map(|_| rng.random_range(0..3)).collect();
    let test_x: Vec<Vec<f64>> = (0..20).map(|_| point(&mut rng)).collect();
    let test_y: Vec<usize> = (0..20).map(|_| rng.random_range(0..3)).collect();

    let exact = oracles::enumerate_influence(10, ENUM_P, |s| {
        oracles::one_nn_correctness(&train_x, &train_y, s, &test_x, &test_y)
    });
    let train = dataset(&train_x, &train_y, 3);
    let test = dataset(&test_x, &test_y, 3);
    let masks = sample_masks(ENUM_TRIALS, 10, ENUM_P, 5).map_err(|e| e.to_string())?;
    let records = run_trials(&train, &test, &masks, &OneNearestNeighbor, 5, 1).map_err(|e| e.to_string())?;
    let est = estimate_influence(&records, &masks, Target::Test).map_err(|e| e.to_string())?;
    let err = max_abs_diff(&as_rows(&est), &exact)?;
    let defined = exact.iter().flatten().filter(|v| !v.is_nan()).count();
    let nonzero = exact.iter().flatten().filter(|v| v.abs() > 1e-9).count();
    ensure!(nonzero > 0, "fixture has no non-zero influence");
    ensure!(err <= 0.02, "max abs error {err:.4} > 0.02");
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 120.0, "took {secs:.1}s (limit 120s)");
    Ok(format!(
        "max abs error {err:.4} <= 0.02 over {defined} entries ({nonzero} non-zero), {secs:.1}s"
    ))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut nan_entries = 0usize;
    let mut rejected = 0usize;
    let mut fixture = 0;
    'draw: while fixture < 50 {
        let t = rng.random_range(2..=50);
        let n = rng.random_range(1..=100);
        let m = rng.random_range(1..=100);
        let p = rng.random_range(0.05..0.95);
        let masks = sample_masks(t, n, p, rng.random()).map_err(|e| e.to_string())?;
        let q: f64 = rng.random_range(0.0..1.0);
        let records: Vec<TrialRecord> = (0..t)
            .map(|k| TrialRecord {
                trial_index: k,
                seed: k as u64,
                train_correct: (0..n).map(|_| rng.random_bool(q)).collect(),
                test_correct: (0..m).map(|_| rng.random_bool(q)).collect(),
                eval_accuracy: None,
                status: TrialStatus::Completed,
            })
            .collect();
        let mask_rows: Vec<Vec<bool>> = masks.rows().map(<[bool]>::to_vec).collect();
        for target in [Target::Test, Target::Train] {
            let correct: Vec<Vec<bool>> = records
                .iter()
                .map(|r| match target {
                    Target::Test => r.test_correct.clone(),
                    Target::Train => r.train_correct.clone(),
                })
                .collect();
            let naive = oracles::naive_influence(&mask_rows, &correct);
            let fast = match estimate_influence(&records, &masks, target) {
                Ok(f) => f,
                // no column has both sides populated: the estimator refuses,
                // and the loop must agree that nothing is defined
                Err(Error::Estimation(_)) if naive.iter().flatten().all(|v| v.is_nan()) => {
                    rejected += 1;
                    continue 'draw;
                }
                Err(e) => return Err(format!("fixture {fixture}: {e}")),
            };
            for (i, row) in naive.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    let w = fast.row(i)[j];
                    if v.is_nan() && w.is_nan() {
                        nan_entries += 1;
                        continue;
                    }
                    ensure!(
                        v.to_bits() == w.to_bits(),
                        "fixture {fixture} ({target:?}, t={t}, n={n}): entry ({i},{j}) {w} != {v}"
                    );
                }
            }
        }
        fixture += 1;
    }
    Ok(format!(
        "50 fixtures x 2 roles bit-identical ({nan_entries} undefined entries agree; \
         {rejected} fully undefined draws refused by both)"
    ))
}

fn criterion_3() -> Outcome {
    // Cluster A (label 0) near the origin with a planted label-1 point inside
    // it; cluster B (label 1) holds a pair of exact duplicates.
    let train_x = vec![
        vec![0.0, 0.0],
        vec![0.3, 0.1],
        vec![-0.2, 0.25],
        vec![0.1, -0.3],
        vec![0.05, 0.05],
        vec![5.0, 5.0],
        vec![5.3, 4.8],
        vec![4.7, 5.2],
        vec![5.1, 5.1],
        vec![5.1, 5.1],
    ];
    let train_y = vec![0, 0, 0, 0, 1, 1, 1, 1, 1, 1];
    let (noisy, twin) = (4usize, 8usize);
    let exact = oracles::enumerate_influence(10, ENUM_P, |s| {
        oracles::one_nn_correctness(&train_x, &train_y, s, &train_x, &train_y)
    });
    let train = dataset(&train_x, &train_y, 2);
    let masks = sample_masks(ENUM_TRIALS, 10, ENUM_P, 9).map_err(|e| e.to_string())?;
    let records = run_trials(&train, &train, &masks, &OneNearestNeighbor, 9, 1).map_err(|e| e.to_string())?;
    let est = estimate_influence(&records, &masks, Target::Train).map_err(|e| e.to_string())?;
    let mem = memorization(&est).map_err(|e| e.to_string())?;
    let (m_noisy, m_twin) = (exact[noisy][noisy], exact[twin][twin]);
    ensure!(m_noisy >= 0.9, "oracle memorization of the planted example {m_noisy:.4} < 0.9");
    ensure!(m_twin <= 0.1, "oracle memorization of the duplicated twin {m_twin:.4} > 0.1");
    let mut worst = 0.0f64;
    for (j, &m) in mem.iter().enumerate() {
        worst = worst.max((m - exact[j][j]).abs());
    }
    ensure!(worst <= 0.05, "estimator vs oracle memorization differs by {worst:.4} > 0.05");
    Ok(format!(
        "planted {m_noisy:.4} >= 0.9, twin {m_twin:.4} <= 0.1, estimator within {worst:.4} <= 0.05 \
         (estimates {:.4} / {:.4})",
        mem[noisy], mem[twin]
    ))
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn criterion_4() -> Outcome {
    let a = [1.0, 2.0, 3.0, 4.0, 5.0];
    let b = [2.0, 3.0, 4.0, 5.0, 6.0];
    let r = ttest_two_sample(&a, &b, TTestVariant::StudentPooled).map_err(|e| e.to_string())?;
    ensure!((r.t_statistic + 1.0).abs() <= 1e-6, "t = {}", r.t_statistic);
    ensure!(r.degrees_of_freedom == 8.0, "df = {}", r.degrees_of_freedom);
    ensure!((r.p_value - 0.3466).abs() <= 1e-4, "p = {}", r.p_value);

    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut checked = 0;
    for _ in 0..1000 {
        let na = rng.random_range(2..40);
        let nb = rng.random_range(2..40);
        let loc: f64 = rng.random_range(-5.0..5.0);
        let xa: Vec<f64> = (0..na).map(|_| loc + rng.random_range(-3.0..3.0)).collect();
        let xb: Vec<f64> = (0..nb).map(|_| rng.random_range(-3.0..3.0)).collect();
        let scale: f64 = 10f64.powf(rng.random_range(-3.0..3.0));
        let sa: Vec<f64> = xa.iter().map(|v| v * scale).collect();
        let sb: Vec<f64> = xb.iter().map(|v| v * scale).collect();
        for variant in [TTestVariant::StudentPooled, TTestVariant::Welch] {
            let ab = ttest_two_sample(&xa, &xb, variant).map_err(|e| e.to_string())?;
            let ba = ttest_two_sample(&xb, &xa, variant).map_err(|e| e.to_string())?;
            let scaled = ttest_two_sample(&sa, &sb, variant).map_err(|e| e.to_string())?;
            ensure!(
                rel_close(ab.t_statistic, -ba.t_statistic, 1e-12) && rel_close(ab.p_value, ba.p_value, 1e-12),
                "antisymmetry broken: {} vs {}",
                ab.t_statistic,
                ba.t_statistic
            );
            ensure!(
                rel_close(ab.t_statistic, scaled.t_statistic, 1e-12)
                    && rel_close(ab.degrees_of_freedom, scaled.degrees_of_freedom, 1e-12)
                    && rel_close(ab.p_value, scaled.p_value, 1e-12),
                "scale invariance broken at scale {scale}: t {} vs {}",
                ab.t_statistic,
                scaled.t_statistic
            );
            if variant == TTestVariant::StudentPooled {
                let (t, df) = oracles::pooled_t(&xa, &xb);
                ensure!(
                    rel_close(ab.t_statistic, t, 1e-12) && df == ab.degrees_of_freedom,
                    "pooled t {} vs oracle {t}",
                    ab.t_statistic
                );
            }
            checked += 1;
        }
    }
    Ok(format!(
        "fixture t={:.6} df={} p={:.6}; {checked} random tests antisymmetric and scale invariant to 1e-12",
        r.t_statistic, r.degrees_of_freedom, r.p_value
    ))
}

fn random_spec(rng: &mut ChaCha8Rng) -> ModelSpec {
    let n_features = rng.random_range(2..12);
    let n_classes = rng.random_range(2..6);
    if rng.random_bool(0.3) {
        ModelSpec::softmax_linear(n_features, n_classes)
    } else {
        let depth = rng.random_range(1..3);
        let widths = (0..depth).map(|_| rng.random_range(2..20)).collect();
        let act = if rng.random_bool(0.5) { Activation::Relu } else { Activation::Tanh };
        ModelSpec::mlp(n_features, widths, act, n_classes)
    }
}

fn random_params(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Params {
    let mut p = Params::init(spec, rng.random());
    for t in p.tensors_mut() {
        let scale = 10f64.powf(rng.random_range(-1.0..1.0));
        for v in t.data.iter_mut() {
            *v = if t.name.ends_with(".bias") {
                rng.random_range(-0.5..0.5)
            } else {
                *v * scale
            };
        }
    }
    p
}

fn weight_zero_pattern(p: &Params) -> Vec<Vec<bool>> {
    p.tensors()
        .iter()
        .filter(|t| !t.name.ends_with(".bias"))
        .map(|t| t.data.iter().map(|&v| v == 0.0).collect())
        .collect()
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for model in 0..20 {
        let spec = random_spec(&mut rng);
        let params = random_params(&spec, &mut rng);

        let s: f64 = rng.random_range(0.0..0.99);
        let scope = if rng.random_bool(0.5) { PruneScope::Global } else { PruneScope::PerTensor };
        let pruned = prune_magnitude(&params, s, scope).map_err(|e| e.to_string())?;
        let pattern = weight_zero_pattern(&pruned);
        let zeros = pattern.iter().flatten().filter(|&&z| z).count();
        let total = pattern.iter().map(Vec::len).sum::<usize>();
        ensure!(
            zeros as f64 / total as f64 >= s,
            "model {model}: zero fraction {zeros}/{total} below {s}"
        );

        let bits = rng.random_range(1..=8u32);
        let q = quantize_uniform(&params, bits).map_err(|e| e.to_string())?;
        for (orig, quant) in params.tensors().iter().zip(q.tensors()) {
            let distinct: BTreeSet<u64> = quant.data.iter().map(|v| v.to_bits()).collect();
            ensure!(
                distinct.len() <= 1 << bits,
                "model {model} {}: {} distinct values > 2^{bits}",
                quant.name,
                distinct.len()
            );
            let lo = orig.data.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = orig.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let half_level = if hi > lo { (hi - lo) / ((1u64 << bits) - 1) as f64 / 2.0 } else { 0.0 };
            for (&a, &b) in orig.data.iter().zip(&quant.data) {
                ensure!(
                    (a - b).abs() <= half_level * (1.0 + 1e-9) + 1e-15,
                    "model {model} {}: |{a} - {b}| exceeds half a level {half_level}",
                    quant.name
                );
            }
        }

        let n = 30;
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..spec.n_features).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.n_classes)).collect();
        let data = dataset(&x, &y, spec.n_classes);
        let reference = TrainedModel::from_params(spec.clone(), params.clone()).map_err(|e| e.to_string())?;
        let weighting = if rng.random_bool(0.5) {
            LossWeighting::Adaptive { window: 2, sensitivity: 0.1 }
        } else {
            LossWeighting::Fixed { w_ce: 0.5, w_kd: 0.5 }
        };
        let method = CompressionSpec::PruneThenDistill {
            sparsity: s,
            scope,
            distill: DistillConfig {
                temperature: 2.0,
                weighting,
                epochs: 4,
                learning_rate: 0.05,
                momentum: 0.9,
                batch_size: 8,
                student_widths: None,
            },
        };
        let out = compress(&reference, "reference", &method, &data, rng.random()).map_err(|e| e.to_string())?;
        ensure!(
            weight_zero_pattern(&out.params) == pattern,
            "model {model}: distillation changed the zero pattern"
        );
    }
    Ok("20 random models: prune sparsity, quantize levels and error bound, post-distill zero pattern all hold".into())
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut worst = [0.0f64; 2];
    for (a, worst) in worst.iter_mut().enumerate() {
        let mut points = 0;
        let mut attempts = 0;
        while points < 10 {
            attempts += 1;
            ensure!(attempts < 1000, "could not draw points clear of relu kinks");
            let n_features = rng.random_range(2..8);
            let n_classes = rng.random_range(2..5);
            let spec = if a == 0 {
                ModelSpec::softmax_linear(n_features, n_classes)
            } else {
                let act = if points % 2 == 0 { Activation::Relu } else { Activation::Tanh };
                ModelSpec::mlp(n_features, vec![rng.random_range(2..10), rng.random_range(2..10)], act, n_classes)
            };
            let params = random_params(&spec, &mut rng);
            let batch = rng.random_range(1..10);
            let x = Array2::from_shape_fn((batch, n_features), |_| rng.random_range(-1.0..1.0));
            let y: Vec<u32> = (0..batch).map(|_| rng.random_range(0..n_classes as u32)).collect();
            // finite differences are meaningless across a relu kink
            if spec.activation == Activation::Relu && a == 1 && preactivation_margin(&spec, &params, &x) <= 1e-3 {
                continue;
            }
            *worst = worst.max(gradient_check(&spec, &params, &x, &y));
            points += 1;
        }
    }
    ensure!(
        worst.iter().all(|&w| w <= 1e-4),
        "max relative error softmax_linear {:.2e}, mlp {:.2e} (limit 1e-4)",
        worst[0],
        worst[1]
    );
    Ok(format!(
        "max relative error softmax_linear {:.2e}, mlp {:.2e} <= 1e-4 (10 points each)",
        worst[0], worst[1]
    ))
}

const DESK_CONFIG: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/desk_longtail.json");
const PIPELINE_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const PIPELINE_LIMIT: Duration = Duration::from_secs(15 * 60);

fn memgauge(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_memgauge"))
        .args(args)
        .env_remove("MEMGAUGE_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "memgauge {} exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

/// Full estimate, compress, analyze, report pipeline for one seed.
fn run_pipeline(out: &Path, seed: u64, jobs: usize) -> Result<PathBuf, String> {
    let seed_s = seed.to_string();
    let jobs_s = jobs.to_string();
    let out_s = out.to_str().unwrap();
    let run_id = format!("desk-seed{seed}");
    let common = ["--config", DESK_CONFIG, "--out", out_s, "--seed", &seed_s, "--run-id", &run_id];
    let mut est: Vec<&str> = vec!["estimate"];
    est.extend(common);
    est.extend(["--jobs", &jobs_s]);
    memgauge(&est)?;
    for cmd in ["compress", "analyze"] {
        let mut args = vec![cmd];
        args.extend(common);
        memgauge(&args)?;
    }
    let run = out.join(&run_id);
    for format in ["text", "json", "csv", "svg"] {
        memgauge(&["report", "--run", run.to_str().unwrap(), "--format", format])?;
    }
    Ok(run)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_slice(&bytes).map_err(|e| format!("{}: {e}", path.display()))
}

fn acceptance_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn criterion_7() -> Outcome {
    let out = acceptance_dir("pipeline");
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    let mut positive = 0;
    let mut failing_seeds = Vec::new();
    for seed in PIPELINE_SEEDS {
        let start = Instant::now();
        let run = run_pipeline(&out, seed, 4)?;
        let elapsed = start.elapsed();
        if elapsed > PIPELINE_LIMIT {
            failures.push(format!("seed {seed}: pipeline took {:.0}s", elapsed.as_secs_f64()));
        }

        let bytes = std::fs::read(run.join("influence_test.infl")).map_err(|e| e.to_string())?;
        let inf = InfluenceMatrix::read_from(Cursor::new(bytes)).map_err(|e| e.to_string())?;
        let means: Vec<f64> = mean_received_influence(&inf).into_iter().filter(|v| v.is_finite()).collect();
        let near_zero = means.iter().filter(|v| v.abs() < 1e-3).count() as f64 / means.len() as f64;
        let overview: Overview = read_json(&run.join("reports/overview.json"))?;
        if (overview.near_zero_fraction - near_zero).abs() > 1e-12 {
            failures.push(format!("seed {seed}: reported near-zero fraction disagrees with the influence file"));
        }
        if near_zero < 0.9 {
            failures.push(format!("seed {seed}: only {:.1}% of |mean influence| < 1e-3", 100.0 * near_zero));
        }

        let analysis: MethodAnalysis = read_json(&run.join("reports/prune-s0.9.analysis.json"))?;
        let cies = analysis.cie_report.counts.cie;
        if cies == 0 {
            failures.push(format!("seed {seed}: no CIEs"));
        }
        let t = analysis
            .tests
            .iter()
            .find(|e| {
                e.subset == memgauge_core::analysis::CieSubset::AllCie
                    && e.variant == TTestVariant::StudentPooled
            })
            .and_then(|e| e.result.as_ref())
            .map(|r| r.t_statistic);
        match t {
            Some(t) if t > 0.0 => positive += 1,
            _ => failing_seeds.push(format!(
                "seed {seed} (t = {}, report {})",
                t.map_or("undefined".into(), |t| format!("{t:.3}")),
                run.join("reports/report.txt").display()
            )),
        }
        lines.push(format!(
            "seed {seed}: {:.0}s, near-zero {:.1}%, CIEs {cies}, t {}",
            elapsed.as_secs_f64(),
            100.0 * near_zero,
            t.map_or("-".into(), |t| format!("{t:+.3}"))
        ));
    }
    for l in &lines {
        println!("    {l}");
    }
    if !failing_seeds.is_empty() {
        println!("    non-positive t: {}", failing_seeds.join("; "));
    }
    if positive < 4 {
        failures.push(format!("t > 0 in only {positive} of 5 seeds"));
    }
    if failures.is_empty() {
        Ok(format!("t > 0 in {positive}/5 seeds; time, near-zero and CIE checks hold for all seeds"))
    } else {
        Err(failures.join("; "))
    }
}

fn criterion_8() -> Outcome {
    let a = run_pipeline(&acceptance_dir("determinism-jobs1"), 7, 1)?;
    let b = run_pipeline(&acceptance_dir("determinism-jobs4"), 7, 4)?;
    let files = [
        "masks.bin",
        "influence_test.infl",
        "influence_train.infl",
        "memorization.json",
        "models/reference.mgpm",
        "models/prune-s0.9.mgpm",
        "reports/overview.json",
        "reports/prune-s0.9.analysis.json",
        "reports/report.json",
        "reports/report.txt",
    ];
    for f in files {
        let x = std::fs::read(a.join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = std::fs::read(b.join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure!(x == y, "{f} differs between --jobs 1 and --jobs 4");
    }
    let trials = std::fs::read_dir(a.join("trials")).map_err(|e| e.to_string())?.count();
    for entry in std::fs::read_dir(a.join("trials")).map_err(|e| e.to_string())? {
        let name = entry.map_err(|e| e.to_string())?.file_name();
        let x = std::fs::read(a.join("trials").join(&name)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.join("trials").join(&name)).map_err(|e| e.to_string())?;
        ensure!(x == y, "trial file {name:?} differs");
    }
    Ok(format!("{} artifacts and {trials} trial files identical across --jobs 1 and --jobs 4", files.len()))
}

fn cifar_bytes(records: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut out = Vec::with_capacity(records * 3073);
    for _ in 0..records {
        out.push(rng.random_range(0..10u8));
        out.extend((0..3072).map(|_| rng.random::<u8>()));
    }
    out
}

fn criterion_9() -> Outcome {
    let dir = acceptance_dir("cifar");
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut files: Vec<PathBuf> = Vec::new();
    for b in 1..=2 {
        let path = dir.join(format!("data_batch_{b}.bin"));
        std::fs::write(&path, cifar_bytes(100, &mut rng)).unwrap();
        files.push(path);
    }
    if let Ok(real) = std::env::var("CIFAR10_DIR") {
        for name in ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin", "test_batch.bin"] {
            let p = Path::new(&real).join(name);
            if p.is_file() {
                files.push(p);
            }
        }
    }
    for path in &files {
        let original = std::fs::read(path).map_err(|e| e.to_string())?;
        let loaded = load_cifar10(path, None).map_err(|e| e.to_string())?;
        ensure!(loaded.len() * 3073 == original.len(), "{}: wrong record count", path.display());
        let again = to_cifar10_bytes(&loaded).map_err(|e| e.to_string())?;
        ensure!(again == original, "{}: re-serialized bytes differ", path.display());
    }

    let malformed = dir.join("malformed.bin");
    let mut bytes = cifar_bytes(100, &mut rng);
    bytes.push(0);
    std::fs::write(&malformed, &bytes).unwrap();
    match load_cifar10(&malformed, None) {
        Err(Error::MalformedFile { .. }) => {}
        other => return Err(format!("malformed size: expected MalformedFile, got {other:?}")),
    }
    let mut bytes = cifar_bytes(10, &mut rng);
    bytes[7 * 3073] = 12;
    match parse_cifar10(&bytes) {
        Err(Error::InvalidLabel { index: 7, label: 12 }) => {}
        other => return Err(format!("bad label: expected InvalidLabel at 7, got {other:?}")),
    }
    Ok(format!(
        "{} batch files round-trip byte-exact; malformed size and invalid label rejected",
        files.len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("estimator matches exact enumeration (1-NN)", criterion_1),
        ("matrix and naive-loop influence are bit-identical", criterion_2),
        ("memorization of planted and duplicated examples", criterion_3),
        ("two-sample t-test correctness", criterion_4),
        ("compression invariants", criterion_5),
        ("analytic vs finite-difference gradients", criterion_6),
        ("desk-scale long-tail pipeline", criterion_7),
        ("pipeline determinism across --jobs", criterion_8),
        ("CIFAR-10 loader round trip", criterion_9),
    ];
    let only: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let n = k + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n}: PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n}: FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
