//! Projected gradient attacks on input functions.
//!
//! Two objectives are provided: the physics-informed loss used inside
//! training and the squared error against a reference solution used to
//! build evaluation data. Both run through the same batched PGD loop.

use std::io::Write;

use log::warn;
use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffkit::{sign0, DiffError, Tape, Var};
use crate::function_spaces::uniform_unit_noise;
use crate::operator_net::{DeepOnetParams, NetError, OperatorMap};
use crate::pde_suite::{CollocationSet, Problem, ProblemError};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    Config(String),
    #[error("non-finite attack loss at iteration {iteration}")]
    NanLoss { iteration: usize },
    #[error("{what}: expected {expected}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    Linf,
    L2,
}

/// Units of `epsilon` and `step_alpha`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonScale {
    /// Input-function units.
    Absolute,
    /// Multiples of `max|f|` of each clean sample.
    #[default]
    MaxAbs,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_alpha: f64,
    pub n_iter: usize,
    pub norm: NormKind,
    pub warm_start: bool,
    pub scale: EpsilonScale,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self::training()
    }
}

impl AttackConfig {
    pub const DEFAULT_EPSILON: f64 = 0.1;
    pub const DEFAULT_N_ITER: usize = 20;

    /// `ε = 0.1·max|f|`, `α = ε/4`, 20 sign steps from a random start.
    pub fn training() -> Self {
        Self {
            epsilon: Self::DEFAULT_EPSILON,
            step_alpha: Self::DEFAULT_EPSILON / 4.0,
            n_iter: Self::DEFAULT_N_ITER,
            norm: NormKind::Linf,
            warm_start: true,
            scale: EpsilonScale::MaxAbs,
        }
    }

    /// As [`AttackConfig::training`] but starting from the clean input.
    pub fn evaluation() -> Self {
        Self { warm_start: false, ..Self::training() }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(AttackError::Config(format!("epsilon must be finite and non-negative, got {}", self.epsilon)));
        }
        let alpha_ok = self.step_alpha.is_finite() && (self.step_alpha > 0.0 || (self.step_alpha == 0.0 && self.epsilon == 0.0));
        if self.n_iter > 0 && !alpha_ok {
            return Err(AttackError::Config(format!("step_alpha must be positive, got {}", self.step_alpha)));
        }
        Ok(())
    }

    /// `(ε, α)` in absolute units for the clean sample `f`.
    pub fn radius(&self, f: &[f64]) -> (f64, f64) {
        let s = match self.scale {
            EpsilonScale::Absolute => 1.0,
            EpsilonScale::MaxAbs => f.iter().fold(0.0, |m: f64, v| m.max(v.abs())),
        };
        (self.epsilon * s, self.step_alpha * s)
    }
}

/// Per-sample attack diagnostics.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AttackTrace {
    /// Objective before each update.
    pub loss_per_iter: Vec<f64>,
    /// Objective at the returned input.
    pub final_loss: f64,
    pub final_perturbation_norm: f64,
    /// Updates skipped because the gradient was not finite.
    pub nan_gradient_steps: usize,
}

impl AttackTrace {
    pub fn initial_loss(&self) -> f64 {
        self.loss_per_iter.first().copied().unwrap_or(self.final_loss)
    }
}

/// `‖a − b‖` in the given norm.
pub fn perturbation_norm(a: &[f64], b: &[f64], norm: NormKind) -> f64 {
    let d = a.iter().zip(b).map(|(x, y)| x - y);
    match norm {
        NormKind::Linf => d.fold(0.0, |m, v| m.max(v.abs())),
        NormKind::L2 => d.map(|v| v * v).sum::<f64>().sqrt(),
    }
}

/// Projection of `f_tilde` onto the radius-`eps` ball around `f`.
pub fn project(f_tilde: &[f64], f: &[f64], eps: f64, norm: NormKind) -> Vec<f64> {
    match norm {
        NormKind::Linf => f_tilde.iter().zip(f).map(|(&x, &c)| x.clamp(c - eps, c + eps)).collect(),
        NormKind::L2 => {
            let n = perturbation_norm(f_tilde, f, NormKind::L2);
            if n <= eps {
                f_tilde.to_vec()
            } else {
                let k = eps / n;
                f_tilde.iter().zip(f).map(|(&x, &c)| c + (x - c) * k).collect()
            }
        }
    }
}

/// A batched objective: per-sample losses and their gradients with respect
/// to each sample's input row.
pub trait AttackObjective {
    fn evaluate(&mut self, inputs: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>), AttackError>;
}

/// Objective recorded once on a tape and replayed per iteration.
pub struct TapeObjective {
    tape: Tape<f64>,
    input: Var,
    per_sample: Var,
    total: Var,
}

impl TapeObjective {
    /// `build` records the per-sample objective (`functions×1`) from the
    /// input leaf.
    pub fn new(
        inputs: &Array2<f64>,
        build: impl FnOnce(&mut Tape<f64>, Var) -> Result<Var, AttackError>,
    ) -> Result<Self, AttackError> {
        let mut tape = Tape::new();
        let input = tape.leaf(inputs.clone());
        let per_sample = build(&mut tape, input)?;
        let total = tape.sum(per_sample)?;
        Ok(Self { tape, input, per_sample, total })
    }
}

impl AttackObjective for TapeObjective {
    fn evaluate(&mut self, inputs: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>), AttackError> {
        self.tape.set_leaf(self.input, inputs.clone())?;
        self.tape.replay();
        let losses = self.tape.value(self.per_sample).iter().copied().collect();
        let mut grads = self.tape.backward(self.total)?;
        let g = grads.take(self.input).expect("input is a leaf");
        Ok((losses, g))
    }
}

/// Batched PGD. Returns the attacked rows and one trace per row.
pub fn pgd<O: AttackObjective>(
    objective: &mut O,
    clean: &Array2<f64>,
    config: &AttackConfig,
    seed: u64,
) -> Result<(Array2<f64>, Vec<AttackTrace>), AttackError> {
    config.validate()?;
    let (n, m) = clean.dim();
    let radii: Vec<(f64, f64)> = clean.axis_iter(Axis(0)).map(|r| config.radius(&r.to_vec())).collect();
    let mut x = clean.clone();
    if config.warm_start {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
            let noise = uniform_unit_noise(&mut rng, m);
            let eps = radii[i].0;
            for (v, d) in row.iter_mut().zip(noise) {
                *v += eps * d;
            }
            let proj = project(&row.to_vec(), &clean.row(i).to_vec(), eps, config.norm);
            row.assign(&ndarray::ArrayView1::from(&proj));
        }
    }
    let mut traces = vec![AttackTrace::default(); n];
    for iteration in 0..config.n_iter {
        let (losses, grad) = objective.evaluate(&x)?;
        if losses.iter().any(|l| !l.is_finite()) {
            return Err(AttackError::NanLoss { iteration });
        }
        for i in 0..n {
            traces[i].loss_per_iter.push(losses[i]);
            let (eps, alpha) = radii[i];
            let g = grad.row(i);
            if g.iter().any(|v| !v.is_finite()) {
                warn!("attack iteration {iteration}: non-finite gradient for sample {i}, step skipped");
                traces[i].nan_gradient_steps += 1;
                continue;
            }
            let step: Vec<f64> = match config.norm {
                NormKind::Linf => g.iter().map(|&v| alpha * sign0(v)).collect(),
                NormKind::L2 => {
                    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        g.iter().map(|&v| alpha * v / norm).collect()
                    } else {
                        vec![0.0; m]
                    }
                }
            };
            let moved: Vec<f64> = x.row(i).iter().zip(&step).map(|(a, b)| a + b).collect();
            let proj = project(&moved, &clean.row(i).to_vec(), eps, config.norm);
            x.row_mut(i).assign(&ndarray::ArrayView1::from(&proj));
        }
    }
    let (final_losses, _) = objective.evaluate(&x)?;
    if final_losses.iter().any(|l| !l.is_finite()) {
        return Err(AttackError::NanLoss { iteration: config.n_iter });
    }
    for i in 0..n {
        traces[i].final_loss = final_losses[i];
        traces[i].final_perturbation_norm = perturbation_norm(&x.row(i).to_vec(), &clean.row(i).to_vec(), config.norm);
    }
    Ok((x, traces))
}

/// Physics-informed loss of each row of the input leaf, with the network
/// and its trunk features frozen.
pub fn physics_objective(
    problem: &Problem,
    params: &DeepOnetParams,
    colloc: &CollocationSet,
    inputs: &Array2<f64>,
) -> Result<TapeObjective, AttackError> {
    if inputs.ncols() != problem.sensor_count() {
        return Err(AttackError::Shape { what: "sensor count", expected: problem.sensor_count(), got: inputs.ncols() });
    }
    let features = problem.trunk_features(params, colloc)?;
    TapeObjective::new(inputs, |tape, x| {
        let vars = params.register(tape, false);
        let b = params.record_branch(tape, &vars, x)?;
        let trunks = features.record(tape);
        let loss = problem.record_loss(params, tape, vars.output_bias, b, x, &trunks, colloc)?;
        Ok(loss.per_sample)
    })
}

/// Attack inside training: PGD on the physics-informed loss.
pub fn attack_training_batch(
    problem: &Problem,
    params: &DeepOnetParams,
    inputs: &Array2<f64>,
    colloc: &CollocationSet,
    config: &AttackConfig,
    seed: u64,
) -> Result<(Array2<f64>, Vec<AttackTrace>), AttackError> {
    config.validate()?;
    let mut obj = physics_objective(problem, params, colloc, inputs)?;
    pgd(&mut obj, inputs, config, seed)
}

/// Single-function form of [`attack_training_batch`].
pub fn attack_training(
    problem: &Problem,
    params: &DeepOnetParams,
    f: &[f64],
    colloc: &CollocationSet,
    config: &AttackConfig,
    seed: u64,
) -> Result<(Vec<f64>, AttackTrace), AttackError> {
    let (x, mut t) = attack_training_batch(problem, params, &row(f), colloc, config, seed)?;
    Ok((x.row(0).to_vec(), t.remove(0)))
}

/// One signed gradient step of size `eps` on the physics-informed loss.
pub fn fgsm(
    problem: &Problem,
    params: &DeepOnetParams,
    f: &[f64],
    colloc: &CollocationSet,
    eps: f64,
) -> Result<Vec<f64>, AttackError> {
    let config = AttackConfig {
        epsilon: eps,
        step_alpha: eps.max(f64::MIN_POSITIVE),
        n_iter: 1,
        norm: NormKind::Linf,
        warm_start: false,
        scale: EpsilonScale::Absolute,
    };
    Ok(attack_training(problem, params, f, colloc, &config, 0)?.0)
}

/// Squared solution error `‖G(f̃)(y) − u_true(y)‖²` on a fixed grid.
pub struct EvaluationAttacker<'a> {
    map: OperatorMap<'a>,
}

impl<'a> EvaluationAttacker<'a> {
    pub fn new(params: &'a DeepOnetParams, y_grid: &Array2<f64>) -> Result<Self, AttackError> {
        Ok(Self { map: OperatorMap::new(params, y_grid)? })
    }

    pub fn objective(&self, inputs: &Array2<f64>, u_true: &Array2<f64>) -> Result<TapeObjective, AttackError> {
        let points = self.map.coords().nrows();
        if u_true.dim() != (inputs.nrows(), points) {
            return Err(AttackError::Shape { what: "reference values per sample", expected: points, got: u_true.ncols() });
        }
        TapeObjective::new(inputs, |tape, x| {
            let pred = self.map.record_batch(tape, x)?;
            let truth = tape.constant(u_true.clone());
            let d = tape.sub(pred, truth)?;
            let sq = tape.square(d)?;
            let ones = tape.constant(Array2::ones((points, 1)));
            Ok(tape.matmul(sq, ones)?)
        })
    }

    /// Attacks every row of `inputs` against the matching row of `u_true`.
    pub fn attack_batch(
        &self,
        inputs: &Array2<f64>,
        u_true: &Array2<f64>,
        config: &AttackConfig,
        seed: u64,
    ) -> Result<(Array2<f64>, Vec<AttackTrace>), AttackError> {
        config.validate()?;
        let mut obj = self.objective(inputs, u_true)?;
        pgd(&mut obj, inputs, config, seed)
    }
}

/// Attack for evaluation data: PGD on the squared error against `u_true`.
pub fn attack_evaluation(
    params: &DeepOnetParams,
    f: &[f64],
    u_true: &[f64],
    y_grid: &Array2<f64>,
    config: &AttackConfig,
) -> Result<(Vec<f64>, AttackTrace), AttackError> {
    let attacker = EvaluationAttacker::new(params, y_grid)?;
    let (x, mut t) = attacker.attack_batch(&row(f), &row(u_true), config, 0)?;
    Ok((x.row(0).to_vec(), t.remove(0)))
}

fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape")
}

/// Traces as CSV rows `sample_id, iteration, loss`; the final loss is
/// written with iteration `n_iter`.
pub fn write_traces_csv<W: Write>(traces: &[AttackTrace], out: W) -> Result<(), AttackError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sample_id", "iteration", "loss"])?;
    for (i, t) in traces.iter().enumerate() {
        for (k, l) in t.loss_per_iter.iter().chain(std::iter::once(&t.final_loss)).enumerate() {
            w.write_record(&[i.to_string(), k.to_string(), l.to_string()])?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_examples() {
        assert_eq!(project(&[0.5, -0.05], &[0.0, 0.0], 0.1, NormKind::Linf), vec![0.1, -0.05]);
        let p = project(&[3.0, 4.0], &[0.0, 0.0], 1.0, NormKind::L2);
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.8).abs() < 1e-15);
        assert_eq!(project(&[0.05, 0.0], &[0.0, 0.0], 0.1, NormKind::L2), vec![0.05, 0.0]);
    }

    struct Linear {
        w: Vec<f64>,
    }

    impl AttackObjective for Linear {
        fn evaluate(&mut self, inputs: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>), AttackError> {
            let losses = inputs.axis_iter(Axis(0)).map(|r| r.iter().zip(&self.w).map(|(a, b)| a * b).sum()).collect();
            let g = Array2::from_shape_fn(inputs.dim(), |(_, j)| self.w[j]);
            Ok((losses, g))
        }
    }

    #[test]
    fn linear_objective_reaches_the_corner() {
        let clean = Array2::from_shape_vec((1, 3), vec![1.0, -2.0, 0.5]).unwrap();
        let mut obj = Linear { w: vec![1.0, -1.0, 0.0] };
        let config = AttackConfig {
            epsilon: 0.3,
            step_alpha: 0.1,
            n_iter: 5,
            norm: NormKind::Linf,
            warm_start: false,
            scale: EpsilonScale::Absolute,
        };
        let (x, t) = pgd(&mut obj, &clean, &config, 0).unwrap();
        assert_eq!(x.row(0).to_vec(), vec![1.3, -2.3, 0.5]);
        assert_eq!(t[0].loss_per_iter.len(), 5);
        assert!(t[0].final_loss > t[0].initial_loss());
        assert!(t[0].final_perturbation_norm <= 0.3 + 1e-12);
    }

    #[test]
    fn nan_gradient_is_a_zero_step() {
        struct NanGrad;
        impl AttackObjective for NanGrad {
            fn evaluate(&mut self, inputs: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>), AttackError> {
                Ok((vec![1.0; inputs.nrows()], Array2::from_elem(inputs.dim(), f64::NAN)))
            }
        }
        let clean = Array2::from_elem((2, 3), 1.0);
        let config = AttackConfig { warm_start: false, ..AttackConfig::training() };
        let (x, t) = pgd(&mut NanGrad, &clean, &config, 0).unwrap();
        assert_eq!(x, clean);
        assert_eq!(t[0].nan_gradient_steps, config.n_iter);
    }

    #[test]
    fn nan_loss_reports_iteration() {
        struct NanLoss;
        impl AttackObjective for NanLoss {
            fn evaluate(&mut self, inputs: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>), AttackError> {
                Ok((vec![f64::NAN; inputs.nrows()], Array2::zeros(inputs.dim())))
            }
        }
        let r = pgd(&mut NanLoss, &Array2::ones((1, 2)), &AttackConfig::evaluation(), 0);
        assert!(matches!(r, Err(AttackError::NanLoss { iteration: 0 })));
    }

    #[test]
    fn config_validation() {
        let bad = AttackConfig { epsilon: -1.0, ..AttackConfig::training() };
        assert!(bad.validate().is_err());
        let bad = AttackConfig { step_alpha: 0.0, ..AttackConfig::training() };
        assert!(bad.validate().is_err());
        let ok = AttackConfig { step_alpha: 0.0, n_iter: 0, ..AttackConfig::training() };
        assert!(ok.validate().is_ok());
        let ok = AttackConfig { epsilon: 0.0, step_alpha: 0.0, ..AttackConfig::training() };
        assert!(ok.validate().is_ok());
    }
}
