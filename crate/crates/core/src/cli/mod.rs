//! Command-line surface: `train`, `eval`, `sweep` and `compare`, all driven
//! by one JSON run config with `--set key=value` overrides.

mod config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{apply_override, parse_grid_param, EvalOptions, RunConfig};

use crate::error::{Error, Result};
use crate::eval::{evaluate, export_histogram_csv, export_reports, EvalReport, FeatureSource, Population, ReportFormat};
use crate::model::load_checkpoint;
use crate::trainer::{latest_checkpoint, train, Method, Phase, TrainConfig, CONFIG_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Json(_) => EXIT_CONFIG,
        Error::MissingArtifact(_) => EXIT_MISSING,
        Error::Divergence { .. } => EXIT_DIVERGED,
        _ => EXIT_FAILURE,
    }
}

#[derive(Debug, Parser)]
#[command(name = "metaug", version, about = "Contrastive learning with meta feature augmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one run and write its directory.
    Train(TrainArgs),
    /// Probe, collapse metrics and histograms for a run directory.
    Eval(EvalArgs),
    /// Train and evaluate every cell of a parameter grid.
    Sweep(SweepArgs),
    /// Train and evaluate several methods on shared seeds and batches.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run config; defaults are used for missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set oucl.beta=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Run directory; overrides `out_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Feature source: h, z or z+aug.
    #[arg(long)]
    pub source: Option<String>,
    /// Checkpoint to evaluate instead of the latest one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Grid axis `KEY=V1,V2,...`; repeat for a Cartesian product.
    #[arg(long = "param", value_name = "KEY=VALUES")]
    pub params: Vec<String>,
    /// JSON object mapping keys to value lists.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Comma-separated method names.
    #[arg(long, default_value = "metaug,metaug_oucl_only,metaug_mag_only,infonce")]
    pub methods: String,
    /// Comma-separated seeds; defaults to the config seed.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => {
            let cfg = RunConfig::load(a.config.config.as_deref(), &a.config.set)?;
            let dir = cmd_train(&cfg, a.out.as_deref())?;
            println!("{}", dir.display());
            Ok(())
        }
        Command::Eval(a) => {
            let source = match a.source.as_deref() {
                None => None,
                Some(s) => Some(FeatureSource::parse(s).ok_or_else(|| Error::Config {
                    key: "source".into(),
                    reason: format!("unknown feature source {s:?}; expected h, z or z+aug"),
                })?),
            };
            let files = cmd_eval(&a.run, source, a.checkpoint.as_deref())?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(())
        }
        Command::Sweep(a) => {
            let cfg = RunConfig::load(a.config.config.as_deref(), &a.config.set)?;
            let mut axes = Vec::new();
            if let Some(path) = &a.grid {
                axes.extend(config::load_grid(path)?);
            }
            for p in &a.params {
                axes.push(parse_grid_param(p)?);
            }
            let out = a.out.unwrap_or_else(|| cfg.out_dir_or("sweep"));
            let table = cmd_sweep(&cfg, &axes, &out, workers())?;
            println!("{}", table.display());
            Ok(())
        }
        Command::Compare(a) => {
            let cfg = RunConfig::load(a.config.config.as_deref(), &a.config.set)?;
            let methods = parse_methods(&a.methods)?;
            let seeds = match &a.seeds {
                None => vec![cfg.train.seed],
                Some(s) => s
                    .split(',')
                    .map(|x| {
                        x.trim().parse().map_err(|_| Error::Config {
                            key: "seeds".into(),
                            reason: format!("{x:?} is not an unsigned integer"),
                        })
                    })
                    .collect::<Result<_>>()?,
            };
            let out = a.out.unwrap_or_else(|| cfg.out_dir_or("compare"));
            let table = cmd_compare(&cfg, &methods, &seeds, &out, workers())?;
            println!("{}", table.display());
            Ok(())
        }
    }
}

/// Worker count from `METAUG_WORKERS`, else the number of CPUs.
pub fn workers() -> usize {
    std::env::var("METAUG_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    list.split(',')
        .map(|m| {
            Method::parse(m.trim()).ok_or_else(|| Error::Config {
                key: "methods".into(),
                reason: format!("unknown method {m:?}"),
            })
        })
        .collect()
}

/// Train into a run directory; returns its path.
pub fn cmd_train(cfg: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    let dir = out.map_or_else(
        || cfg.out_dir_or(&format!("{}-seed{}", cfg.train.method.name(), cfg.train.seed)),
        Path::to_path_buf,
    );
    let source = cfg.train.dataset.load()?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    train(&cfg.train, source.as_ref(), Some(&dir))?;
    let resolved = dir.join(CONFIG_FILE);
    fs::write(&resolved, serde_json::to_vec_pretty(&cfg.to_value()?)?).map_err(|e| Error::io(&resolved, e))?;
    Ok(dir)
}

fn file_tag(source: FeatureSource) -> &'static str {
    match source {
        FeatureSource::RepresentationH => "h",
        FeatureSource::ProjectedZ => "z",
        FeatureSource::ProjectedPlusAugmented => "z_aug",
    }
}

fn population_tag(p: Population) -> &'static str {
    match p {
        Population::OriginalsOnly => "originals",
        Population::AugmentedVsOriginal => "augmented",
    }
}

/// Evaluate a run directory's checkpoint and write the reports next to it.
pub fn eval_run(run: &Path, source: Option<FeatureSource>, checkpoint: Option<&Path>) -> Result<(EvalReport, Vec<PathBuf>)> {
    let cfg_path = run.join(CONFIG_FILE);
    if !cfg_path.exists() {
        return Err(Error::MissingArtifact(cfg_path));
    }
    let cfg = RunConfig::load(Some(&cfg_path), &[])?;
    let ckpt_path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => latest_checkpoint(run)?,
    };
    let ckpt = load_checkpoint(&ckpt_path)?;
    let data = cfg.train.dataset.load()?;
    let source = source.unwrap_or(cfg.eval.source);
    let report = evaluate(
        &ckpt.header.model,
        &ckpt.params,
        data.as_ref(),
        source,
        &cfg.eval.probe,
        cfg.eval.bins,
        cfg.eval.histogram_seed,
    )?;
    let tag = file_tag(source);
    let json = run.join(format!("eval_{tag}.json"));
    let csv = run.join(format!("eval_{tag}.csv"));
    export_reports(std::slice::from_ref(&report), &json, ReportFormat::Json)?;
    export_reports(std::slice::from_ref(&report), &csv, ReportFormat::Csv)?;
    let mut files = vec![json, csv];
    for h in &report.histograms {
        let p = run.join(format!("histogram_{tag}_{}.csv", population_tag(h.population)));
        export_histogram_csv(h, &p)?;
        files.push(p);
    }
    Ok((report, files))
}

pub fn cmd_eval(run: &Path, source: Option<FeatureSource>, checkpoint: Option<&Path>) -> Result<Vec<PathBuf>> {
    eval_run(run, source, checkpoint).map(|(_, files)| files)
}

/// One grid axis: a dotted config key and its values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: usize,
    pub params: Vec<(String, serde_json::Value)>,
    pub status: String,
    pub accuracy: Option<f64>,
    pub mean_pairwise_sim: Option<f64>,
    pub mean_dim_std: Option<f64>,
    pub effective_rank: Option<f64>,
}

fn cartesian(axes: &[GridAxis]) -> Vec<Vec<(String, serde_json::Value)>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut cell = prefix.clone();
                    cell.push((axis.key.clone(), v.clone()));
                    cell
                })
            })
            .collect()
    })
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn csv_field(v: &serde_json::Value) -> String {
    let s = match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s
    }
}

fn summarize(report: &EvalReport) -> (f64, f64, f64, f64) {
    let std = &report.collapse.per_dim_std;
    (
        report.probe.accuracy,
        report.collapse.mean_pairwise_sim,
        std.iter().sum::<f64>() / std.len().max(1) as f64,
        report.collapse.effective_rank,
    )
}

fn train_and_eval(cfg: &RunConfig, dir: &Path) -> Result<EvalReport> {
    cmd_train(cfg, Some(dir))?;
    Ok(eval_run(dir, None, None)?.0)
}

/// Run every grid cell (in parallel, `workers` at a time) and write `sweep.csv`.
/// Keys are checked against the config schema before anything runs.
pub fn run_sweep(base: &RunConfig, axes: &[GridAxis], out: &Path, workers: usize) -> Result<Vec<CellResult>> {
    if axes.is_empty() {
        return Err(Error::Config {
            key: "grid".into(),
            reason: "no grid axes given".into(),
        });
    }
    let cells = cartesian(axes);
    let configs = cells
        .iter()
        .map(|cell| {
            let mut cfg = base.clone();
            for (k, v) in cell {
                cfg = cfg.with_override(k, v.clone())?;
            }
            Ok(cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let results: Vec<CellResult> = pool(workers)?.install(|| {
        configs
            .par_iter()
            .zip(&cells)
            .enumerate()
            .map(|(i, (cfg, cell))| {
                let dir = out.join(format!("cell_{i:04}"));
                let (status, report) = match train_and_eval(cfg, &dir) {
                    Ok(r) => ("ok".to_string(), Some(r)),
                    Err(e @ Error::Divergence { .. }) => {
                        log::warn!("cell {i} diverged: {e}");
                        ("diverged".to_string(), None)
                    }
                    Err(e) => (format!("error: {e}"), None),
                };
                let s = report.as_ref().map(summarize);
                CellResult {
                    cell: i,
                    params: cell.clone(),
                    status,
                    accuracy: s.map(|s| s.0),
                    mean_pairwise_sim: s.map(|s| s.1),
                    mean_dim_std: s.map(|s| s.2),
                    effective_rank: s.map(|s| s.3),
                }
            })
            .collect()
    });
    let mut csv = String::from("cell,");
    for a in axes {
        csv.push_str(&a.key);
        csv.push(',');
    }
    csv.push_str("status,accuracy,mean_pairwise_sim,mean_dim_std,effective_rank\n");
    for r in &results {
        csv.push_str(&format!("{},", r.cell));
        for (_, v) in &r.params {
            csv.push_str(&csv_field(v));
            csv.push(',');
        }
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            csv_field(&serde_json::Value::String(r.status.clone())),
            fmt_opt(r.accuracy),
            fmt_opt(r.mean_pairwise_sim),
            fmt_opt(r.mean_dim_std),
            fmt_opt(r.effective_rank)
        ));
    }
    let path = out.join("sweep.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(results)
}

pub fn cmd_sweep(base: &RunConfig, axes: &[GridAxis], out: &Path, workers: usize) -> Result<PathBuf> {
    run_sweep(base, axes, out, workers)?;
    Ok(out.join("sweep.csv"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: Method,
    pub seed: u64,
    pub accuracy: f64,
    pub mean_pairwise_sim: f64,
    pub effective_rank: f64,
    /// Digest of the regular-phase batch hash sequence from the metric log.
    pub batch_digest: String,
}

/// SHA-256 over the regular-step batch hashes of a run's metric log, in order.
pub fn batch_digest(run: &Path) -> Result<String> {
    let path = run.join(crate::trainer::METRICS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut h = Sha256::new();
    for line in text.lines() {
        let rec: crate::trainer::StepRecord = serde_json::from_str(line)?;
        if rec.phase == Phase::Regular {
            h.update(rec.batch_hash.as_bytes());
            h.update(b"\n");
        }
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Train and evaluate each method on each seed; writes `compare.csv`
/// (one row per run) and `compare_summary.csv` (mean accuracy per method).
pub fn run_compare(base: &RunConfig, methods: &[Method], seeds: &[u64], out: &Path, workers: usize) -> Result<Vec<CompareRow>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let jobs: Vec<(Method, u64)> = seeds.iter().flat_map(|&s| methods.iter().map(move |&m| (m, s))).collect();
    let rows = pool(workers)?.install(|| {
        jobs.par_iter()
            .map(|&(method, seed)| {
                let cfg = RunConfig {
                    train: TrainConfig {
                        method,
                        seed,
                        ..base.train.clone()
                    },
                    ..base.clone()
                };
                let dir = out.join(format!("{}-seed{seed}", method.name()));
                let report = train_and_eval(&cfg, &dir)?;
                let (accuracy, mean_pairwise_sim, _, effective_rank) = summarize(&report);
                Ok(CompareRow {
                    method,
                    seed,
                    accuracy,
                    mean_pairwise_sim,
                    effective_rank,
                    batch_digest: batch_digest(&dir)?,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut csv = String::from("method,seed,accuracy,mean_pairwise_sim,effective_rank,batch_digest\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.method.name(),
            r.seed,
            r.accuracy,
            r.mean_pairwise_sim,
            r.effective_rank,
            r.batch_digest
        ));
    }
    let path = out.join("compare.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    let mut summary = String::from("method,runs,mean_accuracy\n");
    for &m in methods {
        let acc: Vec<f64> = rows.iter().filter(|r| r.method == m).map(|r| r.accuracy).collect();
        summary.push_str(&format!(
            "{},{},{}\n",
            m.name(),
            acc.len(),
            acc.iter().sum::<f64>() / acc.len() as f64
        ));
    }
    let path = out.join("compare_summary.csv");
    fs::write(&path, summary).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

pub fn cmd_compare(base: &RunConfig, methods: &[Method], seeds: &[u64], out: &Path, workers: usize) -> Result<PathBuf> {
    run_compare(base, methods, seeds, out, workers)?;
    Ok(out.join("compare.csv"))
}
