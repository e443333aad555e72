//! Brute-force reference computations for the memgauge test suites.
//!
//! Nothing here shares code with `memgauge-core`. Every routine is written in
//! the most literal form available (exhaustive enumeration, nested loops over
//! plain `Vec`s) so that it can serve as an independent check on the
//! optimized implementation paths.

/// Exact influence of every training example on every target under the
/// product-Bernoulli subset distribution, conditioned on the subset being
/// non-empty.
///
/// `correct(subset)` must return, for a given inclusion vector over the `n`
/// training examples, whether each target is classified correctly by the
/// model trained on that subset. The result is indexed `[target][train]`;
/// entries are `NaN` when a conditioning event has zero probability.
pub fn enumerate_influence<F>(n: usize, p: f64, mut correct: F) -> Vec<Vec<f64>>
where
    F: FnMut(&[bool]) -> Vec<bool>,
{
    assert!(n <= 20, "exhaustive enumeration over 2^{n} subsets is not supported");
    let mut n_targets = None;
    // in_mass[j], out_mass[j]: probability of j included / excluded.
    // in_hit[i][j]: probability of (target i correct and j included).
    let mut in_mass = vec![0.0f64; n];
    let mut out_mass = vec![0.0f64; n];
    let mut in_hit: Vec<Vec<f64>> = Vec::new();
    let mut out_hit: Vec<Vec<f64>> = Vec::new();

    for bits in 1u32..(1u32 << n) {
        let subset: Vec<bool> = (0..n).map(|j| bits & (1 << j) != 0).collect();
        let size = subset.iter().filter(|&&b| b).count();
        let weight = p.powi(size as i32) * (1.0 - p).powi((n - size) as i32);
        let row = correct(&subset);
        let m = *n_targets.get_or_insert(row.len());
        assert_eq!(row.len(), m, "correctness vector length changed between subsets");
        if in_hit.is_empty() {
            in_hit = vec![vec![0.0; n]; m];
            out_hit = vec![vec![0.0; n]; m];
        }
        for j in 0..n {
            if subset[j] {
                in_mass[j] += weight;
            } else {
                out_mass[j] += weight;
            }
            for i in 0..m {
                if row[i] {
                    if subset[j] {
                        in_hit[i][j] += weight;
                    } else {
                        out_hit[i][j] += weight;
                    }
                }
            }
        }
    }

    let m = n_targets.unwrap_or(0);
    let mut out = vec![vec![f64::NAN; n]; m];
    for i in 0..m {
        for j in 0..n {
            if in_mass[j] > 0.0 && out_mass[j] > 0.0 {
                out[i][j] = in_hit[i][j] / in_mass[j] - out_hit[i][j] / out_mass[j];
            }
        }
    }
    out
}

/// Definitional double loop for the subsampled estimator.
///
/// `masks[k][j]` says whether training example `j` was in trial `k`;
/// `correct[k][i]` whether target `i` was classified correctly in trial `k`.
/// Entry `[i][j]` is the mean correctness of `i` over trials containing `j`
/// minus the mean over trials lacking `j`, or `NaN` if either side is empty.
pub fn naive_influence(masks: &[Vec<bool>], correct: &[Vec<bool>]) -> Vec<Vec<f64>> {
    assert_eq!(masks.len(), correct.len());
    let t = masks.len();
    let n = masks.first().map_or(0, Vec::len);
    let m = correct.first().map_or(0, Vec::len);
    let mut out = vec![vec![f64::NAN; n]; m];
    for i in 0..m {
        for j in 0..n {
            let mut in_count = 0u64;
            let mut in_correct = 0u64;
            let mut out_count = 0u64;
            let mut out_correct = 0u64;
            for k in 0..t {
                if masks[k][j] {
                    in_count += 1;
                    if correct[k][i] {
                        in_correct += 1;
                    }
                } else {
                    out_count += 1;
                    if correct[k][i] {
                        out_correct += 1;
                    }
                }
            }
            if in_count > 0 && out_count > 0 {
                out[i][j] = in_correct as f64 / in_count as f64
                    - out_correct as f64 / out_count as f64;
            }
        }
    }
    out
}

/// 1-nearest-neighbor prediction by linear scan over the included training
/// points. Ties go to the lowest training index. Returns `None` when the
/// subset is empty.
pub fn one_nn_predict(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    subset: &[bool],
    query: &[f64],
) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (j, x) in train_x.iter().enumerate() {
        if !subset[j] {
            continue;
        }
        let d: f64 = x.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
        match best {
            Some((bd, _)) if d >= bd => {}
            _ => best = Some((d, j)),
        }
    }
    best.map(|(_, j)| train_y[j])
}

/// Correctness of 1-NN on each query point when trained on `subset`.
pub fn one_nn_correctness(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    subset: &[bool],
    queries: &[Vec<f64>],
    query_labels: &[usize],
) -> Vec<bool> {
    queries
        .iter()
        .zip(query_labels)
        .map(|(q, &y)| one_nn_predict(train_x, train_y, subset, q) == Some(y))
        .collect()
}

/// Sample mean and unbiased variance by two passes.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Pooled-variance two-sample t statistic and its degrees of freedom.
pub fn pooled_t(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let df = na + nb - 2.0;
    let sp2 = ((na - 1.0) * va + (nb - 1.0) * vb) / df;
    ((ma - mb) / (sp2 * (1.0 / na + 1.0 / nb)).sqrt(), df)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_of_constant_learner_is_zero() {
        let infl = enumerate_influence(4, 0.5, |_| vec![true, false]);
        for row in infl {
            for v in row {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn enumeration_of_self_indicator_is_one() {
        // target i is correct iff training example i is present
        let infl = enumerate_influence(3, 0.7, |s| s.to_vec());
        for (i, row) in infl.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if i == j {
                    assert!((v - 1.0).abs() < 1e-12);
                } else {
                    // conditioning on non-empty subsets couples the columns:
                    // P(i | j in) = p, P(i | j out) = p / (1 - (1-p)^(n-1))
                    let expected = 0.7 - 0.7 / (1.0 - 0.3f64.powi(2));
                    assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
                }
            }
        }
    }

    #[test]
    fn naive_loop_small_case() {
        let masks = vec![vec![true, false], vec![false, true], vec![true, true]];
        let correct = vec![vec![true], vec![false], vec![true]];
        let infl = naive_influence(&masks, &correct);
        assert_eq!(infl[0][0], 1.0 - 0.0);
        assert_eq!(infl[0][1], 0.5 - 1.0);
    }

    #[test]
    fn pooled_t_reference_fixture() {
        let (t, df) = pooled_t(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!((t + 1.0).abs() < 1e-12);
        assert_eq!(df, 8.0);
    }
}
