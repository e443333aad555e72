//! Compression-impacted exemplars (CIEs) and the influence t-test.
//!
//! A CIE is a test example on which the reference and compressed models
//! disagree. CIEs are split by who got it right: `cie_u` (reference right),
//! `cie_c` (compressed right) and `cie_w` (both wrong).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::influence::{mean_received_influence, InfluenceMatrix, Target};
use crate::stats::student_t_two_sided_p;

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CieCounts {
    pub cie: usize,
    pub cie_u: usize,
    pub cie_c: usize,
    pub cie_w: usize,
    pub non_cie: usize,
}

/// Partition of test indices by agreement between two models. Index sets are
/// sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CieReport {
    pub cie: Vec<usize>,
    pub cie_u: Vec<usize>,
    pub cie_c: Vec<usize>,
    pub cie_w: Vec<usize>,
    pub non_cie: Vec<usize>,
    pub counts: CieCounts,
    pub ref_model_id: String,
    pub comp_model_id: String,
}

impl CieReport {
    pub fn with_model_ids(mut self, reference: &str, compressed: &str) -> Self {
        self.ref_model_id = reference.to_string();
        self.comp_model_id = compressed.to_string();
        self
    }

    pub fn n_examples(&self) -> usize {
        self.counts.cie + self.counts.non_cie
    }

    pub fn subset(&self, subset: CieSubset) -> &[usize] {
        match subset {
            CieSubset::AllCie => &self.cie,
            CieSubset::CieU => &self.cie_u,
            CieSubset::CieC => &self.cie_c,
        }
    }
}

pub fn find_cies(ref_preds: &[u32], comp_preds: &[u32], labels: &[u32]) -> Result<CieReport> {
    if ref_preds.len() != labels.len() || comp_preds.len() != labels.len() {
        return Err(Error::Dimension {
            what: "prediction vectors vs labels",
            expected: labels.len(),
            actual: if ref_preds.len() != labels.len() {
                ref_preds.len()
            } else {
                comp_preds.len()
            },
        });
    }
    let (mut cie, mut cie_u, mut cie_c, mut cie_w, mut non_cie) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, ((&r, &c), &y)) in ref_preds.iter().zip(comp_preds).zip(labels).enumerate() {
        if r == c {
            non_cie.push(i);
            continue;
        }
        cie.push(i);
        if r == y {
            cie_u.push(i);
        } else if c == y {
            cie_c.push(i);
        } else {
            cie_w.push(i);
        }
    }
    let counts = CieCounts {
        cie: cie.len(),
        cie_u: cie_u.len(),
        cie_c: cie_c.len(),
        cie_w: cie_w.len(),
        non_cie: non_cie.len(),
    };
    Ok(CieReport {
        cie,
        cie_u,
        cie_c,
        cie_w,
        non_cie,
        counts,
        ref_model_id: "reference".into(),
        comp_model_id: "compressed".into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TTestVariant {
    #[default]
    StudentPooled,
    Welch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CieSubset {
    AllCie,
    CieU,
    CieC,
}

impl CieSubset {
    pub const ALL: [CieSubset; 3] = [CieSubset::AllCie, CieSubset::CieU, CieSubset::CieC];

    pub fn name(self) -> &'static str {
        match self {
            CieSubset::AllCie => "all_cie",
            CieSubset::CieU => "cie_u",
            CieSubset::CieC => "cie_c",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t_statistic: f64,
    pub degrees_of_freedom: f64,
    /// Two-sided.
    pub p_value: f64,
    pub variant: TTestVariant,
    pub n_a: usize,
    pub n_b: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub significant_at_005: bool,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, ss / (n - 1.0))
}

/// Two-sample t-test of `mean(a) − mean(b)`; `t > 0` when `a` has the larger
/// mean.
pub fn ttest_two_sample(a: &[f64], b: &[f64], variant: TTestVariant) -> Result<TTestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::DegenerateTest(format!(
            "each group needs at least 2 values (got {} and {})",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::DegenerateTest("non-finite input".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    if va == 0.0 && vb == 0.0 {
        return Err(Error::DegenerateTest("both groups have zero variance".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (se, df) = match variant {
        TTestVariant::StudentPooled => {
            let df = na + nb - 2.0;
            let pooled = ((na - 1.0) * va + (nb - 1.0) * vb) / df;
            ((pooled * (1.0 / na + 1.0 / nb)).sqrt(), df)
        }
        TTestVariant::Welch => {
            let (ra, rb) = (va / na, vb / nb);
            let df = (ra + rb) * (ra + rb) / (ra * ra / (na - 1.0) + rb * rb / (nb - 1.0));
            ((ra + rb).sqrt(), df)
        }
    };
    let t = (ma - mb) / se;
    let p = student_t_two_sided_p(t, df);
    Ok(TTestResult {
        t_statistic: t,
        degrees_of_freedom: df,
        p_value: p,
        variant,
        n_a: a.len(),
        n_b: b.len(),
        mean_a: ma,
        mean_b: mb,
        significant_at_005: p <= SIGNIFICANCE_LEVEL,
    })
}

/// Compare the mean received influence of a CIE subset (group a) against
/// the non-CIEs (group b). Rows whose mean is undefined are dropped.
pub fn cie_influence_test(
    influence: &InfluenceMatrix,
    report: &CieReport,
    subset: CieSubset,
    variant: TTestVariant,
) -> Result<TTestResult> {
    if influence.row_role() != Target::Test {
        return Err(Error::Shape("CIE test needs a test-row influence matrix".into()));
    }
    if influence.rows() != report.n_examples() {
        return Err(Error::Dimension {
            what: "influence rows vs test examples",
            expected: report.n_examples(),
            actual: influence.rows(),
        });
    }
    let means = mean_received_influence(influence);
    let pick = |idx: &[usize]| -> Vec<f64> {
        idx.iter().map(|&i| means[i]).filter(|v| !v.is_nan()).collect()
    };
    let a = pick(report.subset(subset));
    let b = pick(&report.non_cie);
    if a.len() < 2 {
        return Err(Error::DegenerateTest(format!(
            "{} has {} defined rows, need at least 2",
            subset.name(),
            a.len()
        )));
    }
    if b.len() < 2 {
        return Err(Error::DegenerateTest(format!(
            "non_cie has {} defined rows, need at least 2",
            b.len()
        )));
    }
    ttest_two_sample(&a, &b, variant)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Suggests a logarithmic count axis when rendering.
    pub log_scale_hint: bool,
    /// Inputs skipped because they were NaN or infinite.
    pub non_finite: usize,
}

/// Equal-width histogram over the finite range of `values`; the last bin is
/// closed on the right. A zero-width range yields a single bin.
pub fn histogram(values: &[f64], n_bins: usize) -> Result<Histogram> {
    if n_bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return Err(Error::EmptyData);
    }
    let non_finite = values.len() - finite.len();
    let (min, max) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if max == min {
        return Ok(Histogram {
            bin_edges: vec![min, max],
            counts: vec![finite.len()],
            log_scale_hint: true,
            non_finite,
        });
    }
    let width = (max - min) / n_bins as f64;
    let mut bin_edges: Vec<f64> = (0..n_bins).map(|k| min + k as f64 * width).collect();
    bin_edges.push(max);
    let mut counts = vec![0usize; n_bins];
    for v in finite {
        let k = (((v - min) / width).floor() as usize).min(n_bins - 1);
        counts[k] += 1;
    }
    Ok(Histogram {
        bin_edges,
        counts,
        log_scale_hint: true,
        non_finite,
    })
}
