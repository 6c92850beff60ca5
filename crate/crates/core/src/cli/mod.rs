//! Experiment configs, the multi-seed runner and the `near-ortho` commands.
//!
//! | command | writes |
//! |---------|--------|
//! | `train --config C` | `task/`, `report_seed{s}.json`, `ckpt_seed{s}.nowt`, `aggregate.json` |
//! | `eval --ckpt K --task T` | `K.eval.json` (or `--out`) |
//! | `analyze --ckpt K` | `K.geometry.json`, `K.cosine.csv`, `K.spectrum.csv` |
//! | `sweep-alpha --config C --alphas a,b` | `task/`, `alpha_{a}/…`, `sweep.csv`, `sweep.json` |
//!
//! Exit codes: 0 success, 1 other failure, 2 config error or missing
//! file, 3 training divergence, 4 malformed checkpoint/task or shape
//! mismatch. `NEAR_ORTHO_THREADS` caps the number of concurrent runs.

mod config;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

pub use config::{ExperimentConfig, IdxTask, LsuvConfig, Method, TaskSpec};

use crate::data::{self, Dataset};
use crate::diagnostics::{self, DEFAULT_TAU_DEG};
use crate::error::{Error, Result};
use crate::eval::{aggregate, write_aggregate_csv, Aggregate, AggregateRow, MetricKind, RunReport};
use crate::nn::{self, Network, TrainOutcome, DEFAULT_EPSILON};
use crate::ortho::lsuv_init;
use crate::tensor::Rng;

pub const THREADS_ENV: &str = "NEAR_ORTHO_THREADS";
pub const TASK_DIR: &str = "task";

pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DIVERGENCE: i32 = 3;
    pub const FORMAT: i32 = 4;
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => exit::CONFIG,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => exit::CONFIG,
        Error::Divergence { .. } => exit::DIVERGENCE,
        Error::Format { .. } | Error::Dimension(_) | Error::Json(_) => exit::FORMAT,
        _ => exit::FAILURE,
    }
}

/// Worker count: `NEAR_ORTHO_THREADS` if set, else the available cores.
pub fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::config(THREADS_ENV, format!("{v:?} is not a positive integer"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// One seeded run: build, initialize (fan-in or LSUV), train.
pub fn run_seed(cfg: &ExperimentConfig, ds: &Dataset, seed: u64) -> Result<TrainOutcome> {
    let mut rng = Rng::new(seed);
    let mut net = Network::small_conv_net(ds.input_shape, ds.num_classes, cfg.loss.first_activation)?;
    let lsuv = match &cfg.lsuv {
        Some(l) => {
            // The probe is the first batch the trainer will see.
            let probe = data::batches(&ds.train, cfg.sgd.batch_size, &mut rng.derive("batches"))?
                .next()
                .ok_or_else(|| Error::Input("empty training split".into()))?;
            Some(lsuv_init(&mut net, &probe.images, l.tol_var, l.max_iters, &mut rng.derive("init"))?)
        }
        None => {
            net.init_fan_in(&mut rng.derive("init"));
            None
        }
    };
    let mut out = nn::train(net, ds, &cfg.loss, &cfg.sgd, &mut rng)?;
    out.report.config = serde_json::to_value(cfg)?;
    out.report.init_scheme = if lsuv.is_some() { "lsuv" } else { "fan_in" }.into();
    out.report.lsuv = lsuv;
    Ok(out)
}

/// Runs `(config, seed)` jobs on a pool capped by [`THREADS_ENV`].
/// Results come back in job order.
pub fn run_jobs(jobs: &[(&ExperimentConfig, u64)], ds: &Dataset) -> Result<Vec<Result<TrainOutcome>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count()?)
        .build()
        .map_err(|e| Error::Input(format!("thread pool: {e}")))?;
    Ok(pool.install(|| jobs.par_iter().map(|&(cfg, seed)| run_seed(cfg, ds, seed)).collect()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn report_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("report_seed{seed}.json"))
}

pub fn checkpoint_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("ckpt_seed{seed}.nowt"))
}

/// Writes each successful run into `dir`, then aggregates. The first
/// failure (in seed order) is returned after the others are saved.
fn save_runs(dir: &Path, seeds: &[u64], results: Vec<Result<TrainOutcome>>) -> Result<Vec<RunReport>> {
    create_dir(dir)?;
    let mut reports = Vec::with_capacity(results.len());
    let mut first_err = None;
    for (&seed, result) in seeds.iter().zip(results) {
        match result {
            Ok(out) => {
                write_json(&report_path(dir, seed), &out.report)?;
                nn::save_checkpoint(&out.best, checkpoint_path(dir, seed))?;
                reports.push(out.report);
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(reports),
    }
}

fn summary_line(label: &str, agg: &Aggregate) -> String {
    let m = &agg.metrics["test_metric"];
    let cos = &agg.metrics["mean_abs_cos"];
    format!(
        "{label}: test {} {:.4} ± {:.4} over {} seed(s), mean |cos| {:.4}",
        metric_name(agg.metric),
        m.mean,
        m.std,
        m.n,
        cos.mean
    )
}

fn metric_name(m: MetricKind) -> &'static str {
    match m {
        MetricKind::Auroc => "auroc",
        MetricKind::Accuracy => "accuracy",
    }
}

/// `train`: every seed of `cfg` on `ds`, with all artifacts under
/// `cfg.output_dir`.
pub fn train_experiment(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Aggregate> {
    create_dir(&cfg.output_dir)?;
    data::export_dataset(ds, cfg.output_dir.join(TASK_DIR))?;
    let jobs: Vec<_> = cfg.seeds.iter().map(|&s| (cfg, s)).collect();
    let results = run_jobs(&jobs, ds)?;
    let reports = save_runs(&cfg.output_dir, &cfg.seeds, results)?;
    let agg = aggregate(&reports)?;
    write_json(&cfg.output_dir.join("aggregate.json"), &agg)?;
    Ok(agg)
}

#[derive(Serialize)]
struct SweepEntry<'a> {
    method: &'a str,
    alpha: f64,
    aggregate: &'a Aggregate,
}

/// `sweep-alpha`: the experiment once per α, runs in `alpha_{α}/`, one
/// aggregate row per α in `sweep.csv`.
pub fn sweep_alpha(cfg: &ExperimentConfig, ds: &Dataset, alphas: &[f64]) -> Result<Vec<AggregateRow>> {
    if alphas.is_empty() {
        return Err(Error::config("alphas", "at least one α is required"));
    }
    let mut sorted = alphas.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::config("alphas", "values must be distinct"));
    }
    let configs = alphas.iter().map(|&a| cfg.with_alpha(a)).collect::<Result<Vec<_>>>()?;

    create_dir(&cfg.output_dir)?;
    data::export_dataset(ds, cfg.output_dir.join(TASK_DIR))?;
    let jobs: Vec<_> = configs.iter().flat_map(|c| c.seeds.iter().map(move |&s| (c, s))).collect();
    let mut results = run_jobs(&jobs, ds)?.into_iter();

    let mut rows = Vec::with_capacity(alphas.len());
    let mut first_err = None;
    for (c, &alpha) in configs.iter().zip(alphas) {
        let chunk: Vec<_> = results.by_ref().take(c.seeds.len()).collect();
        match save_runs(&cfg.output_dir.join(format!("alpha_{alpha}")), &c.seeds, chunk) {
            Ok(reports) => rows.push(AggregateRow {
                method: cfg.method.name().into(),
                alpha,
                aggregate: aggregate(&reports)?,
            }),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }

    let mut csv = Vec::new();
    write_aggregate_csv(&rows, &mut csv).map_err(|e| Error::io("sweep.csv", e))?;
    write_file(&cfg.output_dir.join("sweep.csv"), &csv)?;
    let entries: Vec<_> = rows
        .iter()
        .map(|r| SweepEntry {
            method: &r.method,
            alpha: r.alpha,
            aggregate: &r.aggregate,
        })
        .collect();
    write_json(&cfg.output_dir.join("sweep.json"), &entries)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct EvalOutput {
    pub checkpoint: PathBuf,
    pub task: PathBuf,
    pub split: String,
    pub metric: MetricKind,
    pub value: f64,
    pub cross_entropy: f64,
    pub origin: data::Origin,
}

/// Scores a checkpoint on the test split of an exported task.
pub fn evaluate_checkpoint(ckpt: &Path, task: &Path) -> Result<EvalOutput> {
    let net = nn::load_checkpoint(ckpt)?;
    let ds = data::import_dataset(task)?;
    if net.input_shape() != ds.input_shape || net.num_classes() != ds.num_classes {
        return Err(Error::Dimension(format!(
            "checkpoint expects {:?} → {} classes, task has {:?} → {}",
            net.input_shape(),
            net.num_classes(),
            ds.input_shape,
            ds.num_classes
        )));
    }
    let e = nn::evaluate_split(&net, &ds.test, ds.metric)?;
    Ok(EvalOutput {
        checkpoint: ckpt.to_path_buf(),
        task: task.to_path_buf(),
        split: "test".into(),
        metric: ds.metric,
        value: e.metric,
        cross_entropy: e.cross_entropy,
        origin: ds.origin,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct AnalyzeOutput {
    pub checkpoint: PathBuf,
    pub epsilon: f64,
    pub geometry: diagnostics::GeometrySummary,
}

/// Files written by `analyze` for checkpoint `ckpt` into `dir`.
pub fn analyze_paths(ckpt: &Path, dir: &Path) -> [PathBuf; 3] {
    let stem = ckpt.file_stem().map_or_else(|| "checkpoint".into(), |s| s.to_string_lossy().into_owned());
    ["geometry.json", "cosine.csv", "spectrum.csv"].map(|ext| dir.join(format!("{stem}.{ext}")))
}

/// First-layer geometry of a checkpoint, written as JSON plus cosine-matrix
/// and Gram-spectrum CSVs.
pub fn analyze_checkpoint(ckpt: &Path, dir: &Path, tau_deg: f64) -> Result<AnalyzeOutput> {
    let net = nn::load_checkpoint(ckpt)?;
    let kb = net.kernel_bank();
    let geometry = diagnostics::summarize(&kb, DEFAULT_EPSILON, tau_deg)?;
    create_dir(dir)?;
    let [json_path, cos_path, spec_path] = analyze_paths(ckpt, dir);
    let out = AnalyzeOutput {
        checkpoint: ckpt.to_path_buf(),
        epsilon: DEFAULT_EPSILON,
        geometry,
    };
    write_json(&json_path, &out)?;
    let mut buf = Vec::new();
    diagnostics::write_matrix_csv(&diagnostics::pairwise_cosine_matrix(&kb, DEFAULT_EPSILON), &mut buf)
        .map_err(|e| Error::io(&cos_path, e))?;
    write_file(&cos_path, &buf)?;
    buf.clear();
    diagnostics::write_vector_csv(&out.geometry.gram_eigenvalues, &mut buf).map_err(|e| Error::io(&spec_path, e))?;
    write_file(&spec_path, &buf)?;
    Ok(out)
}

#[derive(Parser)]
#[command(name = "near-ortho", version, about = "Soft first-layer kernel orthogonalization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on the test split of an exported task.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Task directory or its manifest.json.
        #[arg(long)]
        task: PathBuf,
        /// Output JSON (default: next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export first-layer kernel geometry of a checkpoint.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        /// Output directory (default: the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Half-width in degrees of the near-orthogonal band around 90°.
        #[arg(long, default_value_t = DEFAULT_TAU_DEG)]
        tau: f64,
    },
    /// Repeat an experiment for several values of α.
    SweepAlpha {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        alphas: Vec<f64>,
    },
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn dispatch(command: Command, stdout: &mut impl Write) -> Result<()> {
    let say = |stdout: &mut dyn Write, line: String| {
        let _ = writeln!(stdout, "{line}");
    };
    match command {
        Command::Train { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let ds = cfg.dataset()?;
            let agg = train_experiment(&cfg, &ds)?;
            say(stdout, summary_line(cfg.method.name(), &agg));
            say(stdout, format!("wrote {}", cfg.output_dir.display()));
        }
        Command::Eval { ckpt, task, out } => {
            let result = evaluate_checkpoint(&ckpt, &task)?;
            let path = out.unwrap_or_else(|| ckpt.with_extension("eval.json"));
            write_json(&path, &result)?;
            say(stdout, format!("test {}: {}", metric_name(result.metric), result.value));
        }
        Command::Analyze { ckpt, out, tau } => {
            let dir = out.unwrap_or_else(|| parent_dir(&ckpt));
            let g = analyze_checkpoint(&ckpt, &dir, tau)?.geometry;
            say(
                stdout,
                format!(
                    "K={} mean |cos| {:.4}, mean cos {:.4}, angles {:.1}°–{:.1}°, {:.0}% within {}° of 90°",
                    g.k,
                    g.mean_abs_cos,
                    g.mean_signed_cos,
                    g.min_angle_deg,
                    g.max_angle_deg,
                    100.0 * g.frac_near_orthogonal,
                    g.tau_deg
                ),
            );
        }
        Command::SweepAlpha { config, alphas } => {
            let cfg = ExperimentConfig::load(&config)?;
            let ds = cfg.dataset()?;
            for row in sweep_alpha(&cfg, &ds, &alphas)? {
                say(stdout, summary_line(&format!("α={}", row.alpha), &row.aggregate));
            }
            say(stdout, format!("wrote {}", cfg.output_dir.join("sweep.csv").display()));
        }
    }
    Ok(())
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
            return e.exit_code();
        }
    };
    match dispatch(cli.command, &mut std::io::stdout().lock()) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
