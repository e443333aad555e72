//! `memgauge`: estimate training-data influence by subsampled retraining,
//! compress a reference model, and test whether the examples the compressed
//! model gets differently are unusually highly influenced.
//!
//! The binary is a thin wrapper around [`run_cli`]; the stages are also
//! callable directly through [`commands`].

pub mod commands;
pub mod config;
pub mod error;
pub mod report;
pub mod store;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use memgauge_core::compression::{CompressionSpec, DistillConfig, LossWeighting, PruneScope};
use serde_json::{json, Value};

use crate::config::{RunConfig, SEED_ENV};
use crate::error::{CliError, CliResult};
use crate::report::{Format, Report};
use crate::store::{Manifest, RunDir};

#[derive(Debug, Parser)]
#[command(
    name = "memgauge",
    version,
    about = "Influence estimation, model compression and CIE analysis",
    after_help = "Any config field can be overridden with a dot-path flag, e.g. --estimator.trials 50 or --model.train.epochs 30."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample masks, run (or resume) the trials and estimate influence.
    Estimate(EstimateArgs),
    /// Train the reference model if needed and compress it.
    Compress(CompressArgs),
    /// Extract CIEs and run the influence t-tests.
    Analyze(AnalyzeArgs),
    /// Render the analysis as text, JSON, CSV or SVG.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Run configuration file (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding run directories.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Existing run directory, instead of --config.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Master seed; takes precedence over MEMGAUGE_SEED and the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config's run_id.
    #[arg(long = "run-id")]
    pub run_id: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Number of trials trained concurrently.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Alias for --estimator.trials.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Alias for --estimator.mask_prob (per-example inclusion probability).
    #[arg(long = "mask-prob")]
    pub mask_prob: Option<f64>,
    /// Alias for --model.train.epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct CompressArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// prune, quantize, distill or prune_then_distill. Without it, the
    /// config's compression list is used.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub sparsity: Option<f64>,
    /// global or per_tensor.
    #[arg(long)]
    pub scope: Option<String>,
    #[arg(long)]
    pub bits: Option<u32>,
    /// Adaptive loss weighting for distillation.
    #[arg(long)]
    pub adaptive: bool,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub sensitivity: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long = "w-ce")]
    pub w_ce: Option<f64>,
    #[arg(long = "w-kd")]
    pub w_kd: Option<f64>,
    #[arg(long = "distill-epochs")]
    pub distill_epochs: Option<usize>,
    #[arg(long = "distill-lr")]
    pub distill_lr: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// text, json, csv or svg.
    #[arg(long, default_value = "text")]
    pub format: String,
    /// File-name stem of the outputs under reports/.
    #[arg(long, default_value = "report")]
    pub name: String,
}

/// Pull `--a.b value` / `--a.b=value` pairs out of `args`.
pub fn split_overrides(args: Vec<OsString>) -> CliResult<(Vec<OsString>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(s) = arg.to_str() else {
            rest.push(arg);
            continue;
        };
        let Some(body) = s.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match body.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (body, None),
        };
        if !name.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .and_then(|v| v.into_string().ok())
                .ok_or_else(|| CliError::usage(format!("--{name} needs a value")))?,
        };
        overrides.push((name.to_string(), value));
    }
    Ok((rest, overrides))
}

fn load_config(path: &std::path::Path, overrides: &[(String, String)], args: &RunArgs) -> CliResult<RunConfig> {
    let mut overrides = overrides.to_vec();
    if let Some(id) = &args.run_id {
        overrides.push(("run_id".into(), Value::String(id.clone()).to_string()));
    }
    let env_seed = std::env::var(SEED_ENV).ok();
    let mut config = RunConfig::load(path, &overrides, env_seed.as_deref())?;
    if let Some(s) = args.seed {
        config.seed = s;
    }
    Ok(config)
}

/// Locate an existing run and return it with its configuration snapshot.
fn open_run(args: &RunArgs, overrides: &[(String, String)]) -> CliResult<(RunDir, RunConfig)> {
    let (dir, requested) = match (&args.run, &args.config) {
        (Some(dir), None) => {
            if !overrides.is_empty() || args.seed.is_some() || args.run_id.is_some() {
                return Err(CliError::usage("config overrides need --config, not --run"));
            }
            (dir.clone(), None)
        }
        (None, Some(path)) => {
            let config = load_config(path, overrides, args)?;
            (args.out.join(&config.run_id), Some(config))
        }
        (Some(_), Some(_)) => return Err(CliError::usage("pass either --config or --run, not both")),
        (None, None) => return Err(CliError::usage("pass --config or --run")),
    };
    let run = RunDir::open(dir)?;
    let snapshot: RunConfig = run.read_json(store::CONFIG_SNAPSHOT)?;
    if let Some(requested) = requested {
        if requested != snapshot {
            return Err(CliError::usage(format!(
                "config differs from the snapshot in {}; use a new run_id",
                run.root().display()
            )));
        }
    }
    Ok((run, snapshot))
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn cmd_estimate(args: EstimateArgs, mut overrides: Vec<(String, String)>) -> CliResult<Value> {
    if args.run.run.is_some() {
        return Err(CliError::usage("estimate takes --config, not --run"));
    }
    let path = args
        .run
        .config
        .clone()
        .ok_or_else(|| CliError::usage("estimate needs --config"))?;
    if let Some(t) = args.trials {
        overrides.push(("estimator.trials".into(), t.to_string()));
    }
    if let Some(p) = args.mask_prob {
        overrides.push(("estimator.mask_prob".into(), p.to_string()));
    }
    if let Some(e) = args.epochs {
        overrides.push(("model.train.epochs".into(), e.to_string()));
    }
    let jobs = args.jobs.unwrap_or_else(default_jobs);
    if jobs == 0 {
        return Err(CliError::usage("--jobs must be at least 1"));
    }
    let config = load_config(&path, &overrides, &args.run)?;
    let run = RunDir::create(args.run.out.join(&config.run_id))?;
    let summary = commands::estimate(&run, &config, jobs)?;
    Ok(json!({
        "command": "estimate",
        "run_dir": run.root(),
        "manifest": run.path(store::MANIFEST),
        "summary": summary,
    }))
}

/// Build a compression from flags; `None` when no method flag was given.
pub fn method_from_flags(a: &CompressArgs, config: &RunConfig) -> CliResult<Option<CompressionSpec>> {
    let distill_flags = a.adaptive
        || a.window.is_some()
        || a.sensitivity.is_some()
        || a.temperature.is_some()
        || a.w_ce.is_some()
        || a.w_kd.is_some()
        || a.distill_epochs.is_some()
        || a.distill_lr.is_some();
    let prune_flags = a.sparsity.is_some() || a.scope.is_some();
    let Some(method) = a.method.as_deref() else {
        if distill_flags || prune_flags || a.bits.is_some() {
            return Err(CliError::usage("compression flags need --method"));
        }
        return Ok(None);
    };
    let conflict = |what: &str| CliError::usage(format!("--method {method} does not take {what}"));
    let scope = match a.scope.as_deref() {
        None | Some("global") => PruneScope::Global,
        Some("per_tensor") => PruneScope::PerTensor,
        Some(other) => return Err(CliError::usage(format!("unknown scope {other:?}"))),
    };
    let need_sparsity = || a.sparsity.ok_or_else(|| CliError::usage(format!("--method {method} needs --sparsity")));
    let distill = || -> CliResult<DistillConfig> {
        let weighting = if a.adaptive {
            if a.w_ce.is_some() || a.w_kd.is_some() {
                return Err(CliError::usage("--adaptive conflicts with --w-ce/--w-kd"));
            }
            LossWeighting::Adaptive {
                window: a.window.unwrap_or(3),
                sensitivity: a.sensitivity.unwrap_or(0.1),
            }
        } else {
            if a.window.is_some() || a.sensitivity.is_some() {
                return Err(CliError::usage("--window/--sensitivity need --adaptive"));
            }
            LossWeighting::Fixed {
                w_ce: a.w_ce.unwrap_or(0.5),
                w_kd: a.w_kd.unwrap_or(0.5),
            }
        };
        let t = &config.model.train;
        Ok(DistillConfig {
            temperature: a.temperature.unwrap_or(2.0),
            weighting,
            epochs: a.distill_epochs.unwrap_or(10),
            learning_rate: a.distill_lr.unwrap_or(t.learning_rate),
            momentum: t.momentum,
            batch_size: t.batch_size,
            student_widths: None,
        })
    };
    let spec = match method {
        "prune" => {
            if a.bits.is_some() {
                return Err(conflict("--bits"));
            }
            if distill_flags {
                return Err(conflict("distillation flags"));
            }
            CompressionSpec::Prune {
                sparsity: need_sparsity()?,
                scope,
            }
        }
        "quantize" => {
            if prune_flags {
                return Err(conflict("--sparsity/--scope"));
            }
            if distill_flags {
                return Err(conflict("distillation flags"));
            }
            CompressionSpec::Quantize {
                bits: a.bits.ok_or_else(|| CliError::usage("--method quantize needs --bits"))?,
            }
        }
        "distill" => {
            if prune_flags || a.bits.is_some() {
                return Err(conflict("--sparsity/--scope/--bits"));
            }
            CompressionSpec::Distill { distill: distill()? }
        }
        "prune_then_distill" => {
            if a.bits.is_some() {
                return Err(conflict("--bits"));
            }
            CompressionSpec::PruneThenDistill {
                sparsity: need_sparsity()?,
                scope,
                distill: distill()?,
            }
        }
        other => return Err(CliError::usage(format!("unknown method {other:?}"))),
    };
    spec.validate()?;
    Ok(Some(spec))
}

fn cmd_compress(args: CompressArgs, overrides: Vec<(String, String)>) -> CliResult<Value> {
    let (run, config) = open_run(&args.run, &overrides)?;
    let methods = match method_from_flags(&args, &config)? {
        Some(m) => vec![m],
        None => config.compression.clone(),
    };
    let summaries = commands::compress(&run, &config, &methods)?;
    Ok(json!({
        "command": "compress",
        "run_dir": run.root(),
        "models": summaries,
    }))
}

fn cmd_analyze(args: AnalyzeArgs, overrides: Vec<(String, String)>) -> CliResult<Value> {
    let (run, config) = open_run(&args.run, &overrides)?;
    let analyses = commands::analyze(&run, &config)?;
    let methods: Vec<Value> = analyses
        .iter()
        .map(|a| {
            let all = a
                .tests
                .iter()
                .find(|t| t.result.is_some() && matches!(t.subset, memgauge_core::analysis::CieSubset::AllCie));
            json!({
                "label": a.label,
                "counts": a.cie_report.counts,
                "all_cie_t": all.and_then(|t| t.result.as_ref()).map(|r| r.t_statistic),
            })
        })
        .collect();
    Ok(json!({
        "command": "analyze",
        "run_dir": run.root(),
        "methods": methods,
    }))
}

/// Assemble the report document from a run's analysis artifacts.
pub fn load_report(run: &RunDir) -> CliResult<Report> {
    let manifest = Manifest::load(run)?;
    let mut labels: Vec<String> = Vec::new();
    for e in manifest.entries.iter().filter(|e| e.command == "analyze") {
        if let Some(Value::Array(ls)) = e.details.get("methods") {
            for l in ls.iter().filter_map(Value::as_str) {
                if !labels.iter().any(|x| x == l) {
                    labels.push(l.to_string());
                }
            }
        }
    }
    let mut required = vec![store::OVERVIEW.to_string()];
    required.extend(labels.iter().map(|l| store::analysis_file(l)));
    let missing = run.missing(&required);
    if !missing.is_empty() {
        return Err(CliError::missing(&missing));
    }
    let methods = labels
        .iter()
        .map(|l| run.read_json(&store::analysis_file(l)))
        .collect::<CliResult<Vec<_>>>()?;
    Ok(Report {
        run_id: manifest.run_id.clone(),
        master_seed: manifest.master_seed,
        overview: run.read_json(store::OVERVIEW)?,
        methods,
    })
}

fn cmd_report(args: ReportArgs, overrides: Vec<(String, String)>) -> CliResult<(Value, Option<String>)> {
    let format: Format = args.format.parse()?;
    if args.name.is_empty() || args.name.contains(['/', '\\']) || args.name.starts_with('.') {
        return Err(CliError::usage(format!("invalid report name {:?}", args.name)));
    }
    let (run, _) = open_run(&args.run, &overrides)?;
    let report = load_report(&run)?;
    let mut manifest = Manifest::load(&run)?;
    let stem = format!("{}/{}", store::REPORTS_DIR, args.name);
    let mut written: Vec<(String, String)> = Vec::new();
    let mut stdout_text = None;
    match format {
        Format::Text => {
            let text = report::render_text(&report);
            let rel = format!("{stem}.txt");
            run.write_once(&rel, text.as_bytes())?;
            written.push(("text".into(), rel));
            stdout_text = Some(text);
        }
        Format::Json => {
            let rel = format!("{stem}.json");
            run.write_once(&rel, &report::render_json(&report))?;
            written.push(("json".into(), rel));
        }
        Format::Csv | Format::Svg => {
            for (name, h) in report::named_histograms(&report) {
                let (ext, body) = match format {
                    Format::Csv => ("csv", report::histogram_csv(h)),
                    _ => ("svg", report::histogram_svg(h, &format!("{} ({})", name, report.run_id))),
                };
                let rel = format!("{stem}.{name}.{ext}");
                run.write_once(&rel, body.as_bytes())?;
                written.push((format!("{ext}:{name}"), rel));
            }
        }
    }
    let artifacts: Vec<(&str, String)> = written.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    let mut details = BTreeMap::new();
    details.insert("format".to_string(), json!(args.format));
    manifest.append(&run, store::entry("report", &artifacts, details))?;
    let files: Vec<String> = written
        .iter()
        .map(|(_, rel)| run.path(rel).display().to_string())
        .collect();
    Ok((json!({"command": "report", "files": files}), stdout_text))
}

/// Parse `args` (including the program name), run the command and return
/// the process exit code. Errors go to stderr as one JSON line.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let result = split_overrides(args).and_then(|(args, overrides)| {
        let cli = match Cli::try_parse_from(args) {
            Ok(cli) => cli,
            Err(e) => {
                use clap::error::ErrorKind;
                if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                    let _ = e.print();
                    return Ok(None);
                }
                let text = e.to_string();
                let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
                return Err(CliError::usage(first.trim_start_matches("error: ").to_string()));
            }
        };
        let out = match cli.command {
            Command::Estimate(a) => (cmd_estimate(a, overrides)?, None),
            Command::Compress(a) => (cmd_compress(a, overrides)?, None),
            Command::Analyze(a) => (cmd_analyze(a, overrides)?, None),
            Command::Report(a) => cmd_report(a, overrides)?,
        };
        Ok(Some(out))
    });
    match result {
        Ok(Some((summary, text))) => {
            match text {
                Some(t) => print!("{t}"),
                None => println!("{summary}"),
            }
            0
        }
        Ok(None) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            e.code
        }
    }
}
