//! Adam and the alternating normal / adversarial training loop.

use std::io::Write;

use log::debug;
use ndarray::Array2;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversarial::{attack_training_batch, AttackConfig, AttackError};
use crate::diffkit::{DiffError, Tape};
use crate::operator_net::{ArchSpec, Checkpoint, DeepOnetParams, NetError};
use crate::pde_suite::{stack_inputs, CollocationSet, LossBreakdown, Problem, ProblemError, ProblemSpec};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: String },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize, last_good: Box<Checkpoint> },
    #[error("parameter block shapes do not match")]
    ShapeMismatch,
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub warmup_fraction: f64,
    pub adversarial_cadence: usize,
    pub attack: AttackConfig,
    pub seed: u64,
    pub problem: ProblemSpec,
    pub arch: ArchSpec,
}

impl TrainConfig {
    pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
    pub const DEFAULT_BETAS: (f64, f64) = (0.9, 0.999);
    pub const DEFAULT_EPS: f64 = 1e-8;
    pub const DEFAULT_WARMUP: f64 = 0.2;
    pub const DEFAULT_CADENCE: usize = 2;

    /// Desk-scale defaults for `problem` with the standard architecture.
    pub fn new(problem: ProblemSpec, steps: usize, seed: u64) -> Self {
        let arch = ArchSpec::standard(problem.sensor_count, problem.kind.coord_dim(), problem.kind.default_transform());
        Self {
            steps,
            batch_size: 32,
            learning_rate: Self::DEFAULT_LEARNING_RATE,
            adam_betas: Self::DEFAULT_BETAS,
            adam_eps: Self::DEFAULT_EPS,
            warmup_fraction: Self::DEFAULT_WARMUP,
            adversarial_cadence: Self::DEFAULT_CADENCE,
            attack: AttackConfig::training(),
            seed,
            problem,
            arch,
        }
    }

    /// Same config with adversarial steps disabled.
    pub fn baseline(&self) -> Self {
        Self { warmup_fraction: 1.0, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1]");
        }
        if self.adversarial_cadence == 0 {
            return bad("adversarial_cadence must be at least 1");
        }
        self.attack.validate()?;
        self.problem.validate()?;
        self.arch.validate()?;
        if self.arch.sensor_count() != self.problem.sensor_count || self.arch.coord_dim() != self.problem.kind.coord_dim() {
            return bad("architecture input widths do not match the problem");
        }
        if !self.problem.kind.allowed_transforms().contains(&self.arch.transform) {
            return bad("output transform is not valid for this problem");
        }
        Ok(())
    }

    /// Phase of step `j` (1-based).
    pub fn phase(&self, j: usize) -> Phase {
        if (j as f64) <= self.warmup_fraction * self.steps as f64 {
            Phase::Warmup
        } else if j.is_multiple_of(self.adversarial_cadence) {
            Phase::Adversarial
        } else {
            Phase::Normal
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Normal,
    Adversarial,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Normal => "normal",
            Phase::Adversarial => "adversarial",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<StepRecord>,
}

impl TrainingLog {
    pub const HEADER: [&'static str; 6] = ["step", "phase", "physics", "bc", "ic", "total"];

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::HEADER)?;
        for r in &self.records {
            w.write_record(&[
                r.step.to_string(),
                r.phase.as_str().to_string(),
                r.loss.physics.to_string(),
                r.loss.bc.to_string(),
                r.loss.ic.to_string(),
                r.loss.total.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Adam moments, one pair per parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Array2<f64>>,
    pub second_moment: Vec<Array2<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(blocks: &[Array2<f64>]) -> Self {
        let zeros: Vec<_> = blocks.iter().map(|b| Array2::zeros(b.dim())).collect();
        Self { first_moment: zeros.clone(), second_moment: zeros, t: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        Self { learning_rate: c.learning_rate, beta1: c.adam_betas.0, beta2: c.adam_betas.1, eps: c.adam_eps }
    }
}

/// Bias-corrected Adam update. `names` label blocks in error messages.
pub fn adam_step(
    params: &[Array2<f64>],
    grads: &[Array2<f64>],
    state: &AdamState,
    hyper: AdamHyper,
    names: &[String],
) -> Result<(Vec<Array2<f64>>, AdamState), TrainError> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(TrainError::ShapeMismatch);
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.dim() != g.dim() || p.dim() != state.first_moment[i].dim() {
            return Err(TrainError::ShapeMismatch);
        }
        if g.iter().any(|v| !v.is_finite()) {
            let block = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
            return Err(TrainError::NonFiniteGradient { block });
        }
    }
    let t = state.t + 1;
    let AdamHyper { learning_rate, beta1, beta2, eps } = hyper;
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    let mut new_params = Vec::with_capacity(params.len());
    let mut m_out = Vec::with_capacity(params.len());
    let mut v_out = Vec::with_capacity(params.len());
    for ((p, g), (m, v)) in params.iter().zip(grads).zip(state.first_moment.iter().zip(&state.second_moment)) {
        let mut m_new = m * beta1;
        m_new.scaled_add(1.0 - beta1, g);
        let mut v_new = v * beta2;
        v_new.zip_mut_with(g, |a, &b| *a += (1.0 - beta2) * b * b);
        let mut p_new = p.clone();
        ndarray::Zip::from(&mut p_new).and(&m_new).and(&v_new).for_each(|x, &mi, &vi| {
            let m_hat = mi / c1;
            let v_hat = vi / c2;
            *x -= learning_rate * m_hat / (v_hat.sqrt() + eps);
        });
        new_params.push(p_new);
        m_out.push(m_new);
        v_out.push(v_new);
    }
    Ok((new_params, AdamState { first_moment: m_out, second_moment: v_out, t }))
}

/// Seeds of step `j`: one per batch entry, then one for the attack.
pub fn step_seeds(seed: u64, step: usize, batch: usize) -> (Vec<u64>, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    let samples = (0..batch).map(|_| rng.next_u64()).collect();
    (samples, rng.next_u64())
}

/// Loss breakdown and parameter gradients on a batch.
pub fn loss_and_gradients(
    problem: &Problem,
    params: &DeepOnetParams,
    inputs: &Array2<f64>,
    colloc: &CollocationSet,
) -> Result<(LossBreakdown, Vec<Array2<f64>>), TrainError> {
    let mut tape = Tape::<f64>::new();
    let vars = params.register(&mut tape, true);
    let x = tape.constant(inputs.clone());
    let b = params.record_branch(&mut tape, &vars, x)?;
    let trunks = problem.record_trunks(params, &mut tape, &vars, colloc)?;
    let loss = problem.record_loss(params, &mut tape, vars.output_bias, b, x, &trunks, colloc)?;
    let breakdown = loss.breakdown(&tape);
    if !breakdown.total.is_finite() {
        return Ok((breakdown, vec![]));
    }
    let mut grads = tape.backward(loss.total)?;
    Ok((breakdown, params.collect_gradients(&mut grads, &vars)))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: DeepOnetParams,
    pub log: TrainingLog,
    pub adam: AdamState,
}

/// Runs the alternating min-max loop. `sink` sees every step record with
/// the parameters after that step's update.
pub fn train(
    config: &TrainConfig,
    mut sink: impl FnMut(&StepRecord, &DeepOnetParams),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let problem = Problem::new(config.problem.clone())?;
    let colloc = problem.make_collocation(0)?;
    let mut params = DeepOnetParams::init(&config.arch, config.seed)?;
    let names = params.block_names();
    let mut adam = AdamState::new(&params.blocks());
    let hyper = AdamHyper::from(config);
    let mut log = TrainingLog { records: Vec::with_capacity(config.steps) };
    for j in 1..=config.steps {
        let phase = config.phase(j);
        let (sample_seeds, attack_seed) = step_seeds(config.seed, j, config.batch_size);
        let rows = sample_seeds.iter().map(|&s| Ok(problem.sample_input(s)?.values)).collect::<Result<Vec<_>, ProblemError>>()?;
        let mut inputs = stack_inputs(&rows);
        if phase == Phase::Adversarial {
            inputs = attack_training_batch(&problem, &params, &inputs, &colloc, &config.attack, attack_seed)?.0;
        }
        let (loss, grads) = loss_and_gradients(&problem, &params, &inputs, &colloc)?;
        if !loss.total.is_finite() {
            let last_good = Box::new(Checkpoint { params: params.clone(), seed: config.seed, step: (j - 1) as u64 });
            return Err(TrainError::NonFiniteLoss { step: j, last_good });
        }
        let (blocks, next) = adam_step(&params.blocks(), &grads, &adam, hyper, &names)?;
        params = params.with_blocks(&blocks)?;
        adam = next;
        let record = StepRecord { step: j, phase, loss };
        if j % 500 == 0 || j == config.steps {
            debug!("step {j} [{}] total {:.3e}", phase.as_str(), loss.total);
        }
        sink(&record, &params);
        log.records.push(record);
    }
    Ok(TrainOutcome { params, log, adam })
}

/// [`train`] with every step a normal one.
pub fn train_baseline(
    config: &TrainConfig,
    sink: impl FnMut(&StepRecord, &DeepOnetParams),
) -> Result<TrainOutcome, TrainError> {
    train(&config.baseline(), sink)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde_suite::ProblemKind;

    fn hyper() -> AdamHyper {
        AdamHyper { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let p = vec![Array2::from_elem((2, 2), 0.7)];
        let s = AdamState::new(&p);
        let (q, s2) = adam_step(&p, &[Array2::zeros((2, 2))], &s, hyper(), &[]).unwrap();
        assert_eq!(q, p);
        assert_eq!(s2.t, 1);
    }

    #[test]
    fn adam_first_step_size() {
        let p = vec![Array2::from_elem((1, 1), 0.0)];
        let s = AdamState::new(&p);
        let (q, _) = adam_step(&p, &[Array2::from_elem((1, 1), 1.0)], &s, hyper(), &[]).unwrap();
        let expected = -1e-3 * (1.0 / (1.0 + 1e-8));
        assert!((q[0][(0, 0)] - expected).abs() < 1e-18);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let p = vec![Array2::zeros((1, 1)), Array2::zeros((1, 2))];
        let g = vec![Array2::zeros((1, 1)), Array2::from_elem((1, 2), f64::NAN)];
        let names = vec!["a".to_string(), "trunk.0.bias".to_string()];
        let err = adam_step(&p, &g, &AdamState::new(&p), hyper(), &names).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteGradient { block } if block == "trunk.0.bias"));
    }

    #[test]
    fn phase_schedule_matches_definition() {
        let mut c = TrainConfig::new(ProblemSpec::new(ProblemKind::Poisson1d), 10, 0);
        c.warmup_fraction = 0.3;
        c.adversarial_cadence = 3;
        let adv: Vec<usize> = (1..=10).filter(|&j| c.phase(j) == Phase::Adversarial).collect();
        assert_eq!(adv, vec![6, 9]);
        assert_eq!(c.phase(3), Phase::Warmup);
        assert_eq!(c.phase(4), Phase::Normal);
        assert!((1..=10).all(|j| c.baseline().phase(j) == Phase::Warmup));
    }

    #[test]
    fn step_seeds_are_distinct_across_steps() {
        let (a, sa) = step_seeds(7, 1, 4);
        let (b, _) = step_seeds(7, 2, 4);
        assert_ne!(a, b);
        assert_eq!(step_seeds(7, 1, 4), (a.clone(), sa));
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::new(ProblemSpec::new(ProblemKind::Poisson1d), 10, 0);
        assert!(c.validate().is_ok());
        c.adversarial_cadence = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::new(ProblemSpec::new(ProblemKind::Poisson1d), 10, 0);
        c.arch.branch_widths[0] = 5;
        assert!(c.validate().is_err());
    }
}
