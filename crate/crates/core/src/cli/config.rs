//! Run configuration: a TOML file with one table per module.
//!
//! ```toml
//! seed = 1
//!
//! [problem]
//! kind = "poisson1d"          # the only required key
//! # sensor_count, eval_points, collocation, sampler, constants
//!
//! [arch]                      # branch_widths, trunk_widths, transform
//! [train]                     # mode, steps, batch_size, learning_rate, ...
//! [attack]                    # attack used inside training
//! [eval]                      # n_samples, seed, plot_samples
//! [eval.attack]               # attack used to build the robustness set
//! [eval.spectral]             # tol, max_iter, seed, test_functions
//! [output]                    # dir
//! ```
//!
//! Missing keys take per-problem defaults. The resolved file written next to
//! every run lists every key and parses back to the same configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::adversarial::{AttackConfig, EpsilonScale, NormKind};
use crate::eval_report::SpectralOptions;
use crate::operator_net::{ArchSpec, Transform};
use crate::pde_suite::{CollocationCounts, InputSampler, ProblemKind, ProblemSpec};
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Baseline,
    #[default]
    Stable,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Baseline => "baseline",
            TrainMode::Stable => "stable",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub mode: TrainMode,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub warmup_fraction: f64,
    pub adversarial_cadence: usize,
    /// Periodic checkpoint interval in steps; 0 writes only the final one.
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub n_samples: usize,
    pub seed: u64,
    pub plot_samples: usize,
    pub attack: AttackConfig,
    pub spectral: SpectralOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

/// Fully resolved configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub problem: ProblemSpec,
    pub arch: ArchSpec,
    pub train: TrainSection,
    pub attack: AttackConfig,
    pub eval: EvalSection,
    pub output: OutputSection,
}

pub const DEFAULT_STEPS: usize = 10_000;
pub const DEFAULT_BATCH: usize = 32;
pub const DEFAULT_EVAL_SAMPLES: usize = 200;
pub const DEFAULT_PLOT_SAMPLES: usize = 3;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    problem: Option<RawProblem>,
    arch: Option<RawArch>,
    train: Option<RawTrain>,
    attack: Option<RawAttack>,
    eval: Option<RawEval>,
    output: Option<RawOutput>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProblem {
    kind: Option<ProblemKind>,
    sensor_count: Option<usize>,
    collocation: Option<CollocationCounts>,
    sampler: Option<InputSampler>,
    constants: Option<BTreeMap<String, f64>>,
    eval_points: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawArch {
    branch_widths: Option<Vec<usize>>,
    trunk_widths: Option<Vec<usize>>,
    activation: Option<crate::operator_net::Activation>,
    transform: Option<Transform>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    mode: Option<TrainMode>,
    steps: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    adam_betas: Option<(f64, f64)>,
    adam_eps: Option<f64>,
    warmup_fraction: Option<f64>,
    adversarial_cadence: Option<usize>,
    checkpoint_every: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAttack {
    epsilon: Option<f64>,
    step_alpha: Option<f64>,
    n_iter: Option<usize>,
    norm: Option<NormKind>,
    warm_start: Option<bool>,
    scale: Option<EpsilonScale>,
}

impl RawAttack {
    /// `step_alpha` follows `epsilon` (α = ε/4) unless given.
    fn resolve(self, base: AttackConfig) -> AttackConfig {
        let epsilon = self.epsilon.unwrap_or(base.epsilon);
        AttackConfig {
            epsilon,
            step_alpha: self.step_alpha.unwrap_or(epsilon / 4.0),
            n_iter: self.n_iter.unwrap_or(base.n_iter),
            norm: self.norm.unwrap_or(base.norm),
            warm_start: self.warm_start.unwrap_or(base.warm_start),
            scale: self.scale.unwrap_or(base.scale),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEval {
    n_samples: Option<usize>,
    seed: Option<u64>,
    plot_samples: Option<usize>,
    attack: Option<RawAttack>,
    spectral: Option<RawSpectral>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpectral {
    tol: Option<f64>,
    max_iter: Option<usize>,
    seed: Option<u64>,
    test_functions: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<PathBuf>,
}

impl RunConfig {
    /// Parses, fills defaults and validates.
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {}", e.message())))?;
        let cfg = resolve(raw)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Every key materialized.
    pub fn to_toml_string(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Runtime(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let v = |e: String| CliError::Validation(e);
        self.train_config().validate().map_err(|e| v(e.to_string()))?;
        self.eval.attack.validate().map_err(|e| v(format!("eval.attack: {e}")))?;
        if self.eval.n_samples == 0 {
            return Err(v("eval.n_samples must be positive".into()));
        }
        let s = &self.eval.spectral;
        if !(s.tol > 0.0) || s.max_iter == 0 {
            return Err(v("eval.spectral needs tol > 0 and max_iter > 0".into()));
        }
        if self.output.dir.as_os_str().is_empty() {
            return Err(v("output.dir must not be empty".into()));
        }
        Ok(())
    }

    /// Training configuration in the mode requested by `train.mode`.
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let cfg = TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            adam_betas: t.adam_betas,
            adam_eps: t.adam_eps,
            warmup_fraction: t.warmup_fraction,
            adversarial_cadence: t.adversarial_cadence,
            attack: self.attack,
            seed: self.seed,
            problem: self.problem.clone(),
            arch: self.arch.clone(),
        };
        match t.mode {
            TrainMode::Baseline => cfg.baseline(),
            TrainMode::Stable => cfg,
        }
    }

    /// Same run with `train.mode` replaced.
    pub fn with_mode(&self, mode: TrainMode) -> Self {
        let mut c = self.clone();
        c.train.mode = mode;
        c
    }
}

fn missing(key: &str) -> CliError {
    CliError::Validation(format!("missing required key `{key}`"))
}

fn resolve(raw: RawConfig) -> Result<RunConfig, CliError> {
    let p = raw.problem.ok_or_else(|| missing("problem"))?;
    let kind = p.kind.ok_or_else(|| missing("problem.kind"))?;
    let mut problem = ProblemSpec::new(kind);
    if let Some(v) = p.sensor_count {
        problem.sensor_count = v;
    }
    if let Some(v) = p.collocation {
        problem.collocation = v;
    }
    if let Some(v) = p.sampler {
        problem.sampler = v;
    }
    if let Some(v) = p.constants {
        problem.constants.extend(v);
    }
    if let Some(v) = p.eval_points {
        problem.eval_points = v;
    }

    let a = raw.arch.unwrap_or_default();
    let mut arch = ArchSpec::standard(problem.sensor_count, kind.coord_dim(), a.transform.unwrap_or(kind.default_transform()));
    if let Some(w) = a.branch_widths {
        arch.branch_widths = w;
    }
    if let Some(w) = a.trunk_widths {
        arch.trunk_widths = w;
    }
    if let Some(act) = a.activation {
        arch.activation = act;
    }

    let t = raw.train.unwrap_or_default();
    let train = TrainSection {
        mode: t.mode.unwrap_or_default(),
        steps: t.steps.unwrap_or(DEFAULT_STEPS),
        batch_size: t.batch_size.unwrap_or(DEFAULT_BATCH),
        learning_rate: t.learning_rate.unwrap_or(TrainConfig::DEFAULT_LEARNING_RATE),
        adam_betas: t.adam_betas.unwrap_or(TrainConfig::DEFAULT_BETAS),
        adam_eps: t.adam_eps.unwrap_or(TrainConfig::DEFAULT_EPS),
        warmup_fraction: t.warmup_fraction.unwrap_or(TrainConfig::DEFAULT_WARMUP),
        adversarial_cadence: t.adversarial_cadence.unwrap_or(TrainConfig::DEFAULT_CADENCE),
        checkpoint_every: t.checkpoint_every.unwrap_or(0),
    };

    let attack = raw.attack.unwrap_or_default().resolve(AttackConfig::training());
    let e = raw.eval.unwrap_or_default();
    let s = e.spectral.unwrap_or_default();
    let sd = SpectralOptions::default();
    let eval = EvalSection {
        n_samples: e.n_samples.unwrap_or(DEFAULT_EVAL_SAMPLES),
        seed: e.seed.unwrap_or(raw.seed.unwrap_or(0).wrapping_add(1)),
        plot_samples: e.plot_samples.unwrap_or(DEFAULT_PLOT_SAMPLES),
        attack: e.attack.unwrap_or_default().resolve(AttackConfig::evaluation()),
        spectral: SpectralOptions {
            tol: s.tol.unwrap_or(sd.tol),
            max_iter: s.max_iter.unwrap_or(sd.max_iter),
            seed: s.seed.unwrap_or(sd.seed),
            test_functions: s.test_functions.unwrap_or(sd.test_functions),
        },
    };
    let output = OutputSection {
        dir: raw.output.and_then(|o| o.dir).unwrap_or_else(|| PathBuf::from(format!("runs/{}", kind.as_str()))),
    };
    Ok(RunConfig { seed: raw.seed.unwrap_or(0), problem, arch, train, attack, eval, output })
}
