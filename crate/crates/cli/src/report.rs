//! Rendering of analysis results as text, JSON, CSV and SVG.

use std::fmt::Write as _;

use memgauge_core::analysis::Histogram;
use serde::{Deserialize, Serialize};

use crate::commands::{MethodAnalysis, Overview};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Text,
    Json,
    Csv,
    Svg,
}

impl std::str::FromStr for Format {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "text" => Ok(Self::Text),
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "svg" => Ok(Self::Svg),
            other => Err(CliError::usage(format!(
                "unknown report format {other:?} (expected text, json, csv or svg)"
            ))),
        }
    }
}

/// Everything `report` renders, as one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub run_id: String,
    pub master_seed: u64,
    pub overview: Overview,
    pub methods: Vec<MethodAnalysis>,
}

fn fmt_num(v: f64) -> String {
    if v == 0.0 || (1e-3..1e4).contains(&v.abs()) {
        format!("{v:.4}")
    } else {
        format!("{v:.3e}")
    }
}

pub fn render_text(report: &Report) -> String {
    let o = &report.overview;
    let mut s = String::new();
    let _ = writeln!(s, "run {} (master seed {})", report.run_id, report.master_seed);
    let _ = writeln!(
        s,
        "influence: {} test x {} train examples over {} completed trials",
        o.n_test, o.n_train, o.trials_completed
    );
    let _ = writeln!(
        s,
        "mean received influence: {:.1}% of test examples below {} in magnitude",
        100.0 * o.near_zero_fraction,
        o.near_zero_threshold
    );
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:<32} {:>7} {:>7} {:>7} {:>7} {:>8} {:>8} {:>8}",
        "method", "cie", "cie_u", "cie_c", "cie_w", "non_cie", "ref_acc", "comp_acc"
    );
    for m in &report.methods {
        let c = &m.cie_report.counts;
        let _ = writeln!(
            s,
            "{:<32} {:>7} {:>7} {:>7} {:>7} {:>8} {:>8.4} {:>8.4}",
            m.label, c.cie, c.cie_u, c.cie_c, c.cie_w, c.non_cie, m.reference_test_accuracy, m.compressed_test_accuracy
        );
    }
    for m in &report.methods {
        let _ = writeln!(s);
        let _ = writeln!(s, "t-tests for {} (CIE group vs non-CIE, mean received influence)", m.label);
        let _ = writeln!(
            s,
            "  {:<8} {:<15} {:>6} {:>6} {:>11} {:>11} {:>9} {:>9} {:>10}",
            "subset", "variant", "n_a", "n_b", "mean_a", "mean_b", "t", "df", "p"
        );
        for t in &m.tests {
            let subset = serde_json::to_value(t.subset).expect("enum");
            let variant = serde_json::to_value(t.variant).expect("enum");
            let (subset, variant) = (subset.as_str().unwrap_or(""), variant.as_str().unwrap_or(""));
            match (&t.result, &t.notice) {
                (Some(r), _) => {
                    let _ = writeln!(
                        s,
                        "  {:<8} {:<15} {:>6} {:>6} {:>11} {:>11} {:>9.4} {:>9.2} {:>10}{}",
                        subset,
                        variant,
                        r.n_a,
                        r.n_b,
                        fmt_num(r.mean_a),
                        fmt_num(r.mean_b),
                        r.t_statistic,
                        r.degrees_of_freedom,
                        fmt_num(r.p_value),
                        if r.significant_at_005 { " *" } else { "" }
                    );
                }
                (None, notice) => {
                    let _ = writeln!(
                        s,
                        "  {:<8} {:<15} not tested: {}",
                        subset,
                        variant,
                        notice.as_deref().unwrap_or("no result")
                    );
                }
            }
        }
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "* p <= 0.05 (two-sided)");
    s
}

pub fn render_json(report: &Report) -> Vec<u8> {
    crate::store::to_json_bytes(report)
}

pub fn histogram_csv(h: &Histogram) -> String {
    let mut s = String::from("bin_left,bin_right,count\n");
    for (k, c) in h.counts.iter().enumerate() {
        let _ = writeln!(s, "{},{},{}", h.bin_edges[k], h.bin_edges[k + 1], c);
    }
    s
}

/// Bar chart with a base-10 logarithmic count axis; empty bins draw nothing.
pub fn histogram_svg(h: &Histogram, title: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const LEFT: f64 = 60.0;
    const RIGHT: f64 = 20.0;
    const TOP: f64 = 30.0;
    const BOTTOM: f64 = 50.0;
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let max_count = h.counts.iter().copied().max().unwrap_or(1).max(1);
    let decades = ((max_count as f64).log10().ceil()).max(1.0);
    // a count of 1 sits just above the baseline so it stays visible
    let y_of = |c: f64| TOP + plot_h * (1.0 - (c.log10() + 0.1) / (decades + 0.1));
    let bar_w = plot_w / h.counts.len() as f64;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#,
        W / 2.0,
        xml_escape(title)
    );
    for d in 0..=decades as u32 {
        let y = y_of(10f64.powi(d as i32));
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" text-anchor="end">1e{d}</text>"##,
            W - RIGHT,
            LEFT - 6.0,
            y + 4.0
        );
    }
    for (k, &c) in h.counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let x = LEFT + k as f64 * bar_w;
        let y = y_of(c as f64);
        let _ = writeln!(
            s,
            r##"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="#4c72b0"><title>[{}, {}]: {c}</title></rect>"##,
            (bar_w - 1.0).max(0.5),
            TOP + plot_h - y,
            h.bin_edges[k],
            h.bin_edges[k + 1]
        );
    }
    let base = TOP + plot_h;
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{base}" x2="{}" y2="{base}" stroke="black"/><line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{base}" stroke="black"/>"#,
        W - RIGHT
    );
    let first = h.bin_edges.first().copied().unwrap_or(0.0);
    let last = h.bin_edges.last().copied().unwrap_or(0.0);
    let _ = writeln!(
        s,
        r#"<text x="{LEFT}" y="{}">{}</text><text x="{}" y="{}" text-anchor="end">{}</text>"#,
        base + 16.0,
        fmt_num(first),
        W - RIGHT,
        base + 16.0,
        fmt_num(last)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">mean influence (count axis is logarithmic)</text>"#,
        LEFT + plot_w / 2.0,
        H - 12.0
    );
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Histograms to render, keyed by a file-name stem.
pub fn named_histograms(report: &Report) -> Vec<(String, &Histogram)> {
    let mut out = vec![("influence".to_string(), &report.overview.influence_histogram)];
    if let Some(h) = &report.overview.memorization_histogram {
        out.push(("memorization".to_string(), h));
    }
    for m in &report.methods {
        if let Some(h) = &m.cie_histogram {
            out.push((format!("{}.cie", m.label), h));
        }
        if let Some(h) = &m.non_cie_histogram {
            out.push((format!("{}.non_cie", m.label), h));
        }
    }
    out
}
