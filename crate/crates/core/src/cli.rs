//! Command-line front end. Every command that writes files also writes a
//! `manifest.json` from which `replay` reruns it.
//!
//! Exit codes: 0 success, 2 configuration, 3 I/O or unreadable input,
//! 4 input validation, 1 numerical failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::em::{run_sslb_with, FitOptions};
use crate::error::{Error, Result};
use crate::evaluation::{consensus_score, run_replicate_study, summarize, StudyConfig};
use crate::io;
use crate::model::{FitConfig, OutcomeMatrix};
use crate::simulation::{simulate_dataset, SimulationConfig, REFERENCE_LABEL};

pub const MANIFEST_FILE: &str = "manifest.json";
/// Outputs that record wall-clock facts and so differ between reruns.
pub const WALL_CLOCK_FILES: [&str; 2] = [MANIFEST_FILE, "timings.csv"];

#[derive(Parser, Debug)]
#[command(name = "ogsslb", version, about = "Spike-and-slab lasso biclustering, optionally outcome-guided")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic benchmark dataset.
    Simulate(SimulateArgs),
    /// Fit biclusters to an expression matrix.
    Fit(FitArgs),
    /// Consensus score of found biclusters against a reference set.
    Evaluate(EvaluateArgs),
    /// Repeated fits of several methods and prior variants on one dataset.
    ReplicateStudy(StudyArgs),
    /// Rerun a command from its manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Expression matrix (samples in rows).
    #[arg(long)]
    x: PathBuf,
    /// Outcome file; with `outcome_guided = true` selects the guided fit.
    #[arg(long)]
    y: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Wall-clock cap for the fit.
    #[arg(long)]
    time_budget_secs: Option<f64>,
    /// Write the per-iteration trace.
    #[arg(long)]
    trace: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    found: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Also write evaluation.json and a manifest here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StudyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Wall-clock cap per fit.
    #[arg(long)]
    time_budget_secs: Option<f64>,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory of the rerun.
    #[arg(long)]
    out: PathBuf,
}

/// Everything needed to rerun a command, plus what it produced.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub workers: usize,
    pub inputs: BTreeMap<String, PathBuf>,
    pub time_budget_secs: Option<f64>,
    pub trace: bool,
    /// Fully resolved configuration.
    pub config: Value,
    pub results: Value,
    pub artifacts: Vec<String>,
    pub started_at: String,
    pub finished_at: String,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_) => 2,
        Error::Io(_) | Error::Parse { .. } | Error::Json(_) => 3,
        Error::DimensionMismatch(_)
        | Error::NonFiniteEntry { .. }
        | Error::NotOneHot { .. }
        | Error::ZeroVarianceColumn { .. } => 4,
        Error::SingularPrecision { .. } | Error::DegenerateConditioning { .. } | Error::NonFiniteState => 1,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let workers = cli.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        return Err(Error::InvalidConfig("--workers must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| match cli.command {
        Command::Simulate(a) => {
            let mut cfg: SimulationConfig = load_config(a.config.as_deref())?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            simulate(&cfg, &a.out, workers)
        }
        Command::Fit(a) => {
            let mut cfg: FitConfig = load_config(a.config.as_deref())?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let job = FitJob { x: a.x, y: a.y, time_budget_secs: a.time_budget_secs, trace: a.trace };
            fit(&cfg, &job, &a.out, workers)
        }
        Command::Evaluate(a) => evaluate(&a.found, &a.truth, a.out.as_deref(), workers),
        Command::ReplicateStudy(a) => {
            let mut cfg: StudyConfig = load_config(a.config.as_deref())?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if a.time_budget_secs.is_some() {
                cfg.time_budget_secs = a.time_budget_secs;
            }
            study(&cfg, &a.out, workers)
        }
        Command::Replay(a) => replay(&a.manifest, &a.out),
    })
}

/// Reads a TOML config; a missing path means all defaults.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn absolute(path: &Path) -> Result<PathBuf> {
    Ok(std::fs::canonicalize(path)?)
}

struct ManifestDraft {
    command: &'static str,
    seed: Option<u64>,
    workers: usize,
    inputs: BTreeMap<String, PathBuf>,
    time_budget_secs: Option<f64>,
    trace: bool,
    config: Value,
    started_at: String,
}

impl ManifestDraft {
    fn new(command: &'static str, seed: Option<u64>, workers: usize, config: Value) -> Self {
        ManifestDraft {
            command,
            seed,
            workers,
            inputs: BTreeMap::new(),
            time_budget_secs: None,
            trace: false,
            config,
            started_at: timestamp(),
        }
    }

    /// Written last, so its presence marks a completed run.
    fn finish(self, out: &Path, results: Value, artifacts: &[&str]) -> Result<()> {
        let manifest = RunManifest {
            command: self.command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: self.seed,
            workers: self.workers,
            inputs: self.inputs,
            time_budget_secs: self.time_budget_secs,
            trace: self.trace,
            config: self.config,
            results,
            artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
            started_at: self.started_at,
            finished_at: timestamp(),
        };
        io::write_json(&out.join(MANIFEST_FILE), &manifest)
    }
}

fn simulate(cfg: &SimulationConfig, out: &Path, workers: usize) -> Result<()> {
    cfg.validate()?;
    let draft = ManifestDraft::new("simulate", Some(cfg.seed), workers, serde_json::to_value(cfg)?);
    let data = simulate_dataset(cfg)?;
    io::write_expression(&out.join("x.csv"), &data.x)?;
    io::write_outcome(&out.join("y.csv"), &data.y, &data.x.sample_ids)?;
    io::write_biclusters(&out.join("truth.json"), &data.truth)?;
    let results = json!({
        "n_samples": data.x.n_samples(),
        "n_genes": data.x.n_genes(),
        "k_true": data.truth.k_hat(),
        "reference_class": REFERENCE_LABEL,
    });
    draft.finish(out, results, &["x.csv", "y.csv", "truth.json"])
}

struct FitJob {
    x: PathBuf,
    y: Option<PathBuf>,
    time_budget_secs: Option<f64>,
    trace: bool,
}

fn fit(cfg: &FitConfig, job: &FitJob, out: &Path, workers: usize) -> Result<()> {
    cfg.validate()?;
    let mut draft = ManifestDraft::new("fit", Some(cfg.seed), workers, serde_json::to_value(cfg)?);
    draft.inputs.insert("x".into(), absolute(&job.x)?);
    if let Some(y) = &job.y {
        draft.inputs.insert("y".into(), absolute(y)?);
    }
    draft.time_budget_secs = job.time_budget_secs;
    draft.trace = job.trace;

    let x = io::read_expression(&job.x)?;
    let y: Option<OutcomeMatrix> = match &job.y {
        Some(p) => Some(io::read_outcome(p, &x.sample_ids, cfg.reference_class.as_deref())?),
        None => None,
    };
    let guided = cfg.outcome_guided && y.is_some();
    let options = FitOptions {
        deadline: job.time_budget_secs.map(|s| Instant::now() + Duration::from_secs_f64(s)),
        record_trace: job.trace,
    };
    let output = run_sslb_with(&x, y.as_ref(), cfg, &options)?;

    let k = output.state.k();
    let columns: Vec<String> = (1..=k).map(|c| format!("bicluster_{c}")).collect();
    let mut artifacts = vec!["biclusters.json", "z.csv", "gamma_tilde.csv"];
    io::write_biclusters(&out.join("biclusters.json"), &output.biclusters)?;
    io::write_labelled_matrix(&out.join("z.csv"), "gene_id", &x.gene_ids, &columns, &output.state.z)?;
    io::write_labelled_matrix(
        &out.join("gamma_tilde.csv"),
        "sample_id",
        &x.sample_ids,
        &columns,
        &output.state.gamma_tilde,
    )?;
    if let (Some(block), Some(y)) = (&output.state.outcome, &y) {
        let rows: Vec<String> = std::iter::once("intercept".to_string()).chain(columns.iter().cloned()).collect();
        io::write_labelled_matrix(&out.join("w.csv"), "row", &rows, &y.class_labels, &block.w)?;
        artifacts.push("w.csv");
    }
    if job.trace {
        let rows = output.trace.iter().map(|t| {
            vec![
                t.iteration.to_string(),
                t.rung.to_string(),
                t.q_value.to_string(),
                t.k_current.to_string(),
                t.max_delta_z.to_string(),
            ]
        });
        io::write_table(&out.join("trace.csv"), &["iteration", "rung", "q_value", "k_current", "max_delta_z"], rows)?;
        artifacts.push("trace.csv");
    }
    let results = json!({
        "method": if guided { "OG-SSLB" } else { "SSLB" },
        "k_hat": output.biclusters.k_hat(),
        "lambda_w": output.state.outcome.as_ref().map(|o| o.lambda_w),
        "xi": output.xi,
        "truncated": output.truncated,
        "rungs": output.rungs,
    });
    draft.finish(out, results, &artifacts)
}

fn evaluate(found: &Path, truth: &Path, out: Option<&Path>, workers: usize) -> Result<()> {
    let f = io::read_biclusters(found)?;
    let t = io::read_biclusters(truth)?;
    let report = json!({
        "score": consensus_score(&f, &t),
        "k_hat": f.k_hat(),
        "k_truth": t.k_hat(),
        "normalization": "max(k_hat, k_truth)",
    });
    println!("{report}");
    if let Some(out) = out {
        let mut draft = ManifestDraft::new("evaluate", None, workers, Value::Null);
        draft.inputs.insert("found".into(), absolute(found)?);
        draft.inputs.insert("truth".into(), absolute(truth)?);
        io::write_json(&out.join("evaluation.json"), &report)?;
        draft.finish(out, report, &["evaluation.json"])?;
    }
    Ok(())
}

fn study(cfg: &StudyConfig, out: &Path, workers: usize) -> Result<()> {
    cfg.validate()?;
    let mut draft = ManifestDraft::new("replicate-study", Some(cfg.seed), workers, serde_json::to_value(cfg)?);
    draft.time_budget_secs = cfg.time_budget_secs;
    let records = run_replicate_study(cfg)?;

    let key = |r: &crate::evaluation::ReplicateRecord| {
        vec![r.method.label().to_string(), r.variant.to_string(), r.seed.to_string()]
    };
    let rows = records.iter().map(|r| {
        let mut row = key(r);
        row.extend([r.score.to_string(), r.k_hat.to_string(), r.truncated.to_string()]);
        row
    });
    io::write_table(&out.join("results.csv"), &["method", "variant", "seed", "score", "k_hat", "truncated"], rows)?;
    let timings = records.iter().map(|r| {
        let mut row = key(r);
        row.push(format!("{:.3}", r.runtime_seconds));
        row
    });
    io::write_table(&out.join("timings.csv"), &["method", "variant", "seed", "runtime_seconds"], timings)?;

    let cells: Vec<Value> = summarize(cfg, &records)
        .iter()
        .map(|s| {
            json!({
                "method": s.method_label,
                "variant": s.prior_variant,
                "mean_k_hat": s.mean_k_hat(),
                "median_score": s.median_score(),
                "consensus_scores": s.consensus_scores,
                "k_hats": s.k_hats,
                "seeds": s.seeds,
            })
        })
        .collect();
    let summary = json!({
        "k_true": cfg.simulation.n_biclusters,
        "score_normalization": "max(k_hat, k_truth)",
        "cells": cells,
    });
    io::write_json(&out.join("summary.json"), &summary)?;
    let truncated = records.iter().filter(|r| r.truncated).count();
    draft.finish(
        out,
        json!({ "fits": records.len(), "truncated_fits": truncated }),
        &["results.csv", "timings.csv", "summary.json"],
    )
}

fn from_snapshot<T: DeserializeOwned>(value: &Value) -> Result<T> {
    serde_json::from_value(value.clone()).map_err(|e| Error::InvalidConfig(format!("manifest config: {e}")))
}

fn input(m: &RunManifest, name: &str) -> Result<PathBuf> {
    m.inputs
        .get(name)
        .cloned()
        .ok_or_else(|| Error::InvalidConfig(format!("manifest lacks input '{name}'")))
}

/// Reruns the command recorded in `manifest` with the same configuration,
/// inputs, seed and worker count, writing into `out`.
pub fn replay(manifest: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(manifest)?;
    let m: RunManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Parse { path: manifest.display().to_string(), message: e.to_string() })?;
    match m.command.as_str() {
        "simulate" => simulate(&from_snapshot(&m.config)?, out, m.workers),
        "fit" => {
            let job = FitJob {
                x: input(&m, "x")?,
                y: m.inputs.get("y").cloned(),
                time_budget_secs: m.time_budget_secs,
                trace: m.trace,
            };
            fit(&from_snapshot(&m.config)?, &job, out, m.workers)
        }
        "evaluate" => evaluate(&input(&m, "found")?, &input(&m, "truth")?, Some(out), m.workers),
        "replicate-study" => study(&from_snapshot(&m.config)?, out, m.workers),
        other => Err(Error::InvalidConfig(format!("unknown command '{other}' in manifest"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_error_class() {
        assert_eq!(exit_code(&Error::InvalidConfig("x".into())), 2);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), 3);
        assert_eq!(exit_code(&Error::DimensionMismatch("x".into())), 4);
        assert_eq!(exit_code(&Error::NonFiniteState), 1);
    }

    #[test]
    fn config_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.toml");
        std::fs::write(&p, "k_init = 30\nomega1 = \"one\"\n").unwrap();
        let err = load_config::<FitConfig>(Some(&p)).unwrap_err();
        assert_eq!(exit_code(&err), 2);
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.toml");
        std::fs::write(&p, "n_samples = 40\nn_gene = 60\n").unwrap();
        assert!(load_config::<SimulationConfig>(Some(&p)).is_err());
    }

    #[test]
    fn missing_config_means_defaults() {
        assert_eq!(load_config::<FitConfig>(None).unwrap(), FitConfig::default());
    }
}
