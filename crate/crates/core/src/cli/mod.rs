//! Command-line orchestration: training, evaluation, standalone attacks,
//! Jacobian diagnostics, data generation and the self-test.
//!
//! Exit codes: 0 success, 1 validation failure, 2 runtime failure.

pub mod config;
pub mod selftest;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use thiserror::Error;

pub use config::{RunConfig, TrainMode};

use crate::adversarial::write_traces_csv;
use crate::eval_report::{
    build_eval_datasets, eval_sample_seeds, jacobian_spectral_norm, predict, stability_report, write_plot_csv,
    EvalDatasets, JacobianEstimate, StabilityReport,
};
use crate::operator_net::{Checkpoint, DeepOnetParams};
use crate::pde_suite::Problem;
use crate::training::{train, StepRecord, TrainError, TrainingLog};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            _ => 2,
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "stablepde", version, about = "Physics-informed DeepONet training with adversarial stability")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model; writes checkpoints, a step log and the resolved config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `train.mode`.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<TrainMode>,
    },
    /// Build both evaluation datasets and compare two trained models.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        stable: PathBuf,
    },
    /// Attack one model on held-out inputs.
    Attack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Jacobian spectral norms of one model on held-out inputs.
    Jacobian {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the fast oracle suite.
    Selftest {
        /// Tolerance override `check=value`; repeatable.
        #[arg(long = "tol", value_parser = parse_override)]
        tol: Vec<(String, f64)>,
    },
    /// Write the clean and attacked datasets without evaluating models.
    GenerateData {
        #[arg(long)]
        config: PathBuf,
        /// Model the robustness set is attacked against.
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    match s {
        "baseline" => Ok(TrainMode::Baseline),
        "stable" => Ok(TrainMode::Stable),
        _ => Err(format!("unknown mode `{s}` (expected baseline or stable)")),
    }
}

fn parse_override(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected check=value, got `{s}`"))?;
    let v: f64 = v.parse().map_err(|_| format!("bad tolerance `{v}`"))?;
    Ok((k.to_string(), v))
}

/// Entry point shared by the binary; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train { config, mode } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(m) = mode {
                cfg = cfg.with_mode(m);
            }
            let out = cmd_train(&cfg)?;
            println!("{}", out.final_checkpoint.display());
        }
        Command::Evaluate { config, baseline, stable } => {
            let cfg = RunConfig::load(&config)?;
            let report = cmd_evaluate(&cfg, &baseline, &stable)?;
            report.write_summary_csv(std::io::stdout().lock()).map_err(runtime)?;
        }
        Command::Attack { config, checkpoint } => {
            let cfg = RunConfig::load(&config)?;
            let dir = cmd_attack(&cfg, &checkpoint)?;
            println!("{}", dir.display());
        }
        Command::Jacobian { config, checkpoint } => {
            let cfg = RunConfig::load(&config)?;
            let est = cmd_jacobian(&cfg, &checkpoint)?;
            let mean = est.iter().map(|e| e.spectral_norm).sum::<f64>() / est.len().max(1) as f64;
            println!("mean_spectral_norm,{mean}");
        }
        Command::Selftest { tol } => {
            let overrides: BTreeMap<String, f64> = tol.into_iter().collect();
            let rows = selftest::run_selftest(&overrides)?;
            selftest::write_table(&rows, std::io::stdout().lock())?;
            if rows.iter().any(|r| !r.passed) {
                return Err(CliError::Validation("selftest failed".into()));
            }
        }
        Command::GenerateData { config, checkpoint } => {
            let cfg = RunConfig::load(&config)?;
            let dir = cmd_generate_data(&cfg, &checkpoint)?;
            println!("{}", dir.display());
        }
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Paths written by [`cmd_train`].
#[derive(Clone, Debug)]
pub struct TrainArtifacts {
    pub dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub step_log: PathBuf,
    pub periodic: Vec<PathBuf>,
}

pub fn train_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output.dir.join(cfg.train.mode.as_str())
}

/// Trains in `train.mode` under `output.dir/<mode>/`. On a non-finite loss
/// the partial log and the last good parameters are kept.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainArtifacts, CliError> {
    cfg.validate()?;
    let dir = train_dir(cfg);
    fs::create_dir_all(&dir)?;
    write_text(&dir.join("resolved_config.toml"), &cfg.to_toml_string()?)?;
    let tc = cfg.train_config();
    let every = cfg.train.checkpoint_every;
    let mut records: Vec<StepRecord> = Vec::new();
    let mut periodic = Vec::new();
    let mut io_error = None;
    let result = train(&tc, |r, params| {
        records.push(*r);
        if every > 0 && r.step % every == 0 && io_error.is_none() {
            let path = dir.join(format!("checkpoint_step_{:06}.json", r.step));
            let ck = Checkpoint { params: params.clone(), seed: cfg.seed, step: r.step as u64 };
            match ck.save(&path) {
                Ok(()) => periodic.push(path),
                Err(e) => io_error = Some(e.to_string()),
            }
        }
    });
    let step_log = dir.join("step_log.csv");
    TrainingLog { records }.write_csv(create(&step_log)?).map_err(runtime)?;
    if let Some(e) = io_error {
        return Err(CliError::Runtime(format!("checkpoint write failed: {e}")));
    }
    let outcome = match result {
        Ok(o) => o,
        Err(TrainError::NonFiniteLoss { step, last_good }) => {
            last_good.save(&dir.join("checkpoint_last_good.json")).map_err(runtime)?;
            return Err(CliError::Runtime(format!("training aborted: non-finite loss at step {step}")));
        }
        Err(e @ TrainError::Config(_)) => return Err(CliError::Validation(e.to_string())),
        Err(e) => return Err(runtime(e)),
    };
    let final_checkpoint = dir.join("checkpoint_final.json");
    Checkpoint { params: outcome.params, seed: cfg.seed, step: cfg.train.steps as u64 }
        .save(&final_checkpoint)
        .map_err(runtime)?;
    info!("wrote {}", final_checkpoint.display());
    Ok(TrainArtifacts { dir, final_checkpoint, step_log, periodic })
}

/// Loads a checkpoint and checks it against the configured architecture.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<DeepOnetParams, CliError> {
    let ck = Checkpoint::load(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    if ck.params.arch != cfg.arch {
        return Err(CliError::Validation(format!(
            "{}: checkpoint architecture does not match the config",
            path.display()
        )));
    }
    Ok(ck.params)
}

fn problem(cfg: &RunConfig) -> Result<Problem, CliError> {
    Problem::new(cfg.problem.clone()).map_err(|e| CliError::Validation(e.to_string()))
}

fn datasets(cfg: &RunConfig, problem: &Problem, model: &DeepOnetParams) -> Result<EvalDatasets, CliError> {
    build_eval_datasets(problem, model, cfg.eval.n_samples, &cfg.eval.attack, cfg.eval.seed).map_err(runtime)
}

/// Writes `summary.csv`, `errors.csv`, `plot_data.csv` and
/// `attack_traces.csv` under `output.dir/eval/`.
pub fn cmd_evaluate(cfg: &RunConfig, baseline: &Path, stable: &Path) -> Result<StabilityReport, CliError> {
    cfg.validate()?;
    let base_model = load_model(cfg, baseline)?;
    let stable_model = load_model(cfg, stable)?;
    let problem = problem(cfg)?;
    let data = datasets(cfg, &problem, &base_model)?;
    let experiment = problem.kind().as_str();
    let report = stability_report(
        experiment,
        &[("baseline", &base_model), ("stable", &stable_model)],
        &data,
        &cfg.eval.spectral,
    )
    .map_err(runtime)?;
    let dir = cfg.output.dir.join("eval");
    report.write_summary_csv(create(&dir.join("summary.csv"))?).map_err(runtime)?;
    report.write_errors_csv(create(&dir.join("errors.csv"))?).map_err(runtime)?;
    let pb = predict(&base_model, &data).map_err(runtime)?;
    let ps = predict(&stable_model, &data).map_err(runtime)?;
    write_plot_csv(&problem, &data, &pb, &ps, cfg.eval.plot_samples, create(&dir.join("plot_data.csv"))?)
        .map_err(runtime)?;
    write_traces_csv(&data.traces, create(&dir.join("attack_traces.csv"))?).map_err(runtime)?;
    Ok(report)
}

/// Writes `attacked_inputs.csv` (`sample_id, sensor, f, f_tilde`) and
/// `attack_traces.csv` under `output.dir/attack/`.
pub fn cmd_attack(cfg: &RunConfig, checkpoint: &Path) -> Result<PathBuf, CliError> {
    cfg.validate()?;
    let model = load_model(cfg, checkpoint)?;
    let problem = problem(cfg)?;
    let data = datasets(cfg, &problem, &model)?;
    let dir = cfg.output.dir.join("attack");
    let mut w = csv::Writer::from_writer(create(&dir.join("attacked_inputs.csv"))?);
    w.write_record(["sample_id", "sensor", "f", "f_tilde"])?;
    for (i, (b, r)) in data.base.iter().zip(&data.robustness).enumerate() {
        for (k, (f, ft)) in b.f.iter().zip(&r.f).enumerate() {
            w.write_record(&[i.to_string(), k.to_string(), f.to_string(), ft.to_string()])?;
        }
    }
    w.flush()?;
    write_traces_csv(&data.traces, create(&dir.join("attack_traces.csv"))?).map_err(runtime)?;
    Ok(dir)
}

/// Spectral norms at `eval.spectral.test_functions` held-out inputs;
/// writes `output.dir/jacobian/spectral_norms.csv`.
pub fn cmd_jacobian(cfg: &RunConfig, checkpoint: &Path) -> Result<Vec<JacobianEstimate>, CliError> {
    cfg.validate()?;
    let model = load_model(cfg, checkpoint)?;
    let problem = problem(cfg)?;
    let grid = problem.eval_grid();
    let s = &cfg.eval.spectral;
    let mut out = Vec::new();
    for seed in eval_sample_seeds(cfg.eval.seed, s.test_functions) {
        let f = problem.sample_input(seed).map_err(runtime)?.values;
        out.push(jacobian_spectral_norm(&model, &f, &grid, s.tol, s.max_iter).map_err(runtime)?);
    }
    let mut w = csv::Writer::from_writer(create(&cfg.output.dir.join("jacobian").join("spectral_norms.csv"))?);
    w.write_record(["sample_id", "spectral_norm", "iterations", "residual"])?;
    for (i, e) in out.iter().enumerate() {
        w.write_record(&[i.to_string(), e.spectral_norm.to_string(), e.iterations_used.to_string(), e.residual.to_string()])?;
    }
    w.flush()?;
    Ok(out)
}

pub const DATA_HEADER: [&str; 4] = ["sample_id", "field", "index", "value"];

/// Writes `y_grid.csv`, `base.csv` and `robustness.csv` under
/// `output.dir/data/`. Dataset rows are `sample_id, field, index, value`
/// with `field` either `f` (sensor values) or `u` (reference on the grid).
pub fn cmd_generate_data(cfg: &RunConfig, checkpoint: &Path) -> Result<PathBuf, CliError> {
    cfg.validate()?;
    let model = load_model(cfg, checkpoint)?;
    let problem = problem(cfg)?;
    let data = datasets(cfg, &problem, &model)?;
    let dir = cfg.output.dir.join("data");
    let mut g = csv::Writer::from_writer(create(&dir.join("y_grid.csv"))?);
    let cols: Vec<&str> = ["x", "y"].into_iter().take(data.y_grid.ncols()).collect();
    g.write_record(&cols)?;
    for row in data.y_grid.rows() {
        g.write_record(row.iter().map(|v| v.to_string()))?;
    }
    g.flush()?;
    for (name, set) in [("base.csv", &data.base), ("robustness.csv", &data.robustness)] {
        let mut w = csv::Writer::from_writer(create(&dir.join(name))?);
        w.write_record(DATA_HEADER)?;
        for (i, s) in set.iter().enumerate() {
            for (field, values) in [("f", &s.f), ("u", &s.u_true)] {
                for (k, v) in values.iter().enumerate() {
                    w.write_record(&[i.to_string(), field.to_string(), k.to_string(), v.to_string()])?;
                }
            }
        }
        w.flush()?;
    }
    Ok(dir)
}
