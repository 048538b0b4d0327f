//! Evaluation datasets, relative errors, Jacobian spectral norms and
//! stability reports.

use std::io::Write;

use ndarray::{Array2, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversarial::{AttackConfig, AttackError, AttackTrace, EvaluationAttacker};
use crate::diffkit::{DiffError, Linearization, VectorFunction};
use crate::operator_net::{DeepOnetParams, NetError, OperatorMap};
use crate::pde_suite::{stack_inputs, Problem, ProblemError};
use crate::reference_solvers::{reference_solution, SolverError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("reference has zero norm")]
    ZeroNormTruth,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("sample {sample}: {source}")]
    Solver { sample: usize, source: SolverError },
    #[error("sample {sample}: {source}")]
    Attack { sample: usize, source: AttackError },
    #[error("power iteration did not converge in {iterations} iterations (last estimate {last_estimate})")]
    NoConvergence { iterations: usize, last_estimate: f64 },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("invalid evaluation options: {0}")]
    Config(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// `‖pred − truth‖₂ / ‖truth‖₂`.
pub fn relative_l2(pred: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch(pred.len(), truth.len()));
    }
    let den = l2(truth);
    if den == 0.0 {
        return Err(EvalError::ZeroNormTruth);
    }
    let num = l2(&pred.iter().zip(truth).map(|(a, b)| a - b).collect::<Vec<_>>());
    Ok(num / den)
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// One input function with its reference solution on the shared grid.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSample {
    pub f: Vec<f64>,
    pub u_true: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationMeta {
    pub attack: AttackConfig,
    pub seed: u64,
    pub problem: String,
}

/// Clean and attacked datasets, aligned by sample index.
#[derive(Clone, Debug)]
pub struct EvalDatasets {
    pub y_grid: Array2<f64>,
    pub base: Vec<EvalSample>,
    pub robustness: Vec<EvalSample>,
    pub traces: Vec<AttackTrace>,
    pub meta: GenerationMeta,
}

impl EvalDatasets {
    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn get(&self, which: DatasetKind) -> &[EvalSample] {
        match which {
            DatasetKind::Base => &self.base,
            DatasetKind::Robustness => &self.robustness,
        }
    }

    /// Reorders every parallel sequence by `order`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let pick = |v: &[EvalSample]| order.iter().map(|&i| v[i].clone()).collect();
        Self {
            y_grid: self.y_grid.clone(),
            base: pick(&self.base),
            robustness: pick(&self.robustness),
            traces: order.iter().filter_map(|&i| self.traces.get(i).cloned()).collect(),
            meta: self.meta.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Base,
    Robustness,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Base => "base",
            DatasetKind::Robustness => "robustness",
        }
    }
}

/// Per-sample seeds for held-out inputs. Stream 0 is never used by
/// training steps, which start at 1.
pub fn eval_sample_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    (0..n).map(|_| rng.next_u64()).collect()
}

const ATTACK_CHUNK: usize = 50;

/// Builds the clean set, attacks `model` on it, and re-solves for the
/// attacked inputs.
pub fn build_eval_datasets(
    problem: &Problem,
    model: &DeepOnetParams,
    n_samples: usize,
    attack: &AttackConfig,
    seed: u64,
) -> Result<EvalDatasets, EvalError> {
    attack.validate().map_err(|e| EvalError::Attack { sample: 0, source: e })?;
    let y_grid = problem.eval_grid();
    let mut base = Vec::with_capacity(n_samples);
    for (i, s) in eval_sample_seeds(seed, n_samples).into_iter().enumerate() {
        let f = problem.sample_input(s)?.values;
        let u_true = reference_solution(problem, &f, &y_grid).map_err(|e| EvalError::Solver { sample: i, source: e })?;
        base.push(EvalSample { f, u_true });
    }
    let attacker = EvaluationAttacker::new(model, &y_grid).map_err(|e| EvalError::Attack { sample: 0, source: e })?;
    let mut robustness = Vec::with_capacity(n_samples);
    let mut traces = Vec::with_capacity(n_samples);
    for (c, chunk) in base.chunks(ATTACK_CHUNK).enumerate() {
        let first = c * ATTACK_CHUNK;
        let inputs = stack_inputs(&chunk.iter().map(|s| s.f.clone()).collect::<Vec<_>>());
        let truth = stack_inputs(&chunk.iter().map(|s| s.u_true.clone()).collect::<Vec<_>>());
        let (attacked, tr) = attacker
            .attack_batch(&inputs, &truth, attack, seed.wrapping_add(c as u64))
            .map_err(|e| EvalError::Attack { sample: first, source: e })?;
        for (k, row) in attacked.axis_iter(Axis(0)).enumerate() {
            let f = row.to_vec();
            let u_true = if f == chunk[k].f {
                chunk[k].u_true.clone()
            } else {
                reference_solution(problem, &f, &y_grid).map_err(|e| EvalError::Solver { sample: first + k, source: e })?
            };
            robustness.push(EvalSample { f, u_true });
        }
        traces.extend(tr);
    }
    Ok(EvalDatasets {
        y_grid,
        base,
        robustness,
        traces,
        meta: GenerationMeta { attack: *attack, seed, problem: problem.kind().as_str().to_string() },
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JacobianEstimate {
    pub spectral_norm: f64,
    pub iterations_used: usize,
    pub residual: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub test_functions: usize,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 500, seed: 0, test_functions: 10 }
    }
}

/// Largest singular value of the Jacobian of `func` at `point`, by power
/// iteration on `JᵀJ` with a seeded start vector.
pub fn power_spectral_norm<F: VectorFunction>(
    func: &F,
    point: &[f64],
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<JacobianEstimate, EvalError> {
    let mut lin = Linearization::new(func, point)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..point.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    normalize(&mut v);
    let mut prev = f64::NAN;
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        let jv = lin.jvp(&v)?;
        let sigma = l2(&jv);
        if it > 1 {
            residual = (sigma - prev).abs();
        }
        if sigma == 0.0 {
            return Ok(JacobianEstimate { spectral_norm: 0.0, iterations_used: it, residual: 0.0 });
        }
        if residual < tol {
            return Ok(JacobianEstimate { spectral_norm: sigma, iterations_used: it, residual });
        }
        prev = sigma;
        v = lin.vjp(&jv)?;
        if normalize(&mut v) == 0.0 {
            return Ok(JacobianEstimate { spectral_norm: 0.0, iterations_used: it, residual: 0.0 });
        }
    }
    Err(EvalError::NoConvergence { iterations: max_iter, last_estimate: prev })
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = l2(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Largest singular value from the dense Jacobian, via Jacobi
/// eigenvalues of `JᵀJ`.
pub fn dense_spectral_norm<F: VectorFunction>(func: &F, point: &[f64]) -> Result<f64, EvalError> {
    let jac = Linearization::new(func, point)?.dense_jacobian()?;
    let gram = jac.t().dot(&jac);
    let eig = symmetric_eigenvalues(gram);
    Ok(eig.into_iter().fold(0.0, f64::max).max(0.0).sqrt())
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(mut a: Array2<f64>) -> Vec<f64> {
    let n = a.nrows();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[(i, j)].powi(2)).sum();
        let diag: f64 = (0..n).map(|i| a[(i, i)].powi(2)).sum();
        if off <= 1e-30 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[(i, i)]).collect()
}

/// Spectral norm of `f ↦ G(f)(y_grid)` at `f`.
pub fn jacobian_spectral_norm(
    model: &DeepOnetParams,
    f: &[f64],
    y_grid: &Array2<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<JacobianEstimate, EvalError> {
    let map = OperatorMap::new(model, y_grid)?;
    power_spectral_norm(&map, f, tol, max_iter, SpectralOptions::default().seed)
}

/// Mean spectral norm over the first `opts.test_functions` samples.
pub fn mean_spectral_norm(
    model: &DeepOnetParams,
    samples: &[EvalSample],
    y_grid: &Array2<f64>,
    opts: &SpectralOptions,
) -> Result<f64, EvalError> {
    let map = OperatorMap::new(model, y_grid)?;
    let used: Vec<_> = samples.iter().take(opts.test_functions).collect();
    if used.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for s in &used {
        total += power_spectral_norm(&map, &s.f, opts.tol, opts.max_iter, opts.seed)?.spectral_norm;
    }
    Ok(total / used.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub experiment: String,
    pub model: String,
    pub dataset: DatasetKind,
    pub errors: Vec<f64>,
    pub mean_rel_l2: f64,
    pub mean_spectral_norm: f64,
    pub c_emp_p50: f64,
    pub c_emp_p95: f64,
}

/// Model predictions on both datasets.
#[derive(Clone, Debug)]
pub struct ModelPredictions {
    pub base: Array2<f64>,
    pub robustness: Array2<f64>,
}

impl ModelPredictions {
    pub fn get(&self, which: DatasetKind) -> &Array2<f64> {
        match which {
            DatasetKind::Base => &self.base,
            DatasetKind::Robustness => &self.robustness,
        }
    }
}

pub fn predict(model: &DeepOnetParams, data: &EvalDatasets) -> Result<ModelPredictions, EvalError> {
    if data.y_grid.ncols() != model.arch.coord_dim() {
        return Err(EvalError::GridMismatch(format!(
            "grid has {} coordinates, model expects {}",
            data.y_grid.ncols(),
            model.arch.coord_dim()
        )));
    }
    if let Some(s) = data.base.first() {
        if s.f.len() != model.arch.sensor_count() {
            return Err(EvalError::GridMismatch(format!(
                "inputs have {} sensors, model expects {}",
                s.f.len(),
                model.arch.sensor_count()
            )));
        }
    }
    let map = OperatorMap::new(model, &data.y_grid)?;
    let run = |set: &[EvalSample]| -> Result<Array2<f64>, EvalError> {
        if set.is_empty() {
            return Ok(Array2::zeros((0, data.y_grid.nrows())));
        }
        Ok(map.eval_batch(&stack_inputs(&set.iter().map(|s| s.f.clone()).collect::<Vec<_>>()))?)
    };
    Ok(ModelPredictions { base: run(&data.base)?, robustness: run(&data.robustness)? })
}

/// Per-sample `‖G(f̃) − G(f)‖₂ / ‖f̃ − f‖₂`; pairs with no perturbation
/// are skipped.
pub fn empirical_stability_ratios(pred: &ModelPredictions, data: &EvalDatasets) -> Vec<f64> {
    let mut out = Vec::new();
    for (i, (b, r)) in data.base.iter().zip(&data.robustness).enumerate() {
        let df = l2(&b.f.iter().zip(&r.f).map(|(a, c)| c - a).collect::<Vec<_>>());
        if df == 0.0 {
            continue;
        }
        let du: f64 = pred.robustness.row(i).iter().zip(pred.base.row(i)).map(|(a, c)| (a - c) * (a - c)).sum::<f64>().sqrt();
        out.push(du / df);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct StabilityReport {
    pub rows: Vec<ReportRow>,
}

/// Two rows per model, base then robustness, in the order of `models`.
/// The stability-ratio columns describe the model and repeat on both rows.
pub fn stability_report(
    experiment: &str,
    models: &[(&str, &DeepOnetParams)],
    data: &EvalDatasets,
    spectral: &SpectralOptions,
) -> Result<StabilityReport, EvalError> {
    let mut rows = Vec::new();
    for (name, model) in models {
        let pred = predict(model, data)?;
        let ratios = empirical_stability_ratios(&pred, data);
        let (p50, p95) = (quantile(&ratios, 0.5), quantile(&ratios, 0.95));
        for which in [DatasetKind::Base, DatasetKind::Robustness] {
            let set = data.get(which);
            let p = pred.get(which);
            let errors = set
                .iter()
                .enumerate()
                .map(|(i, s)| relative_l2(&p.row(i).to_vec(), &s.u_true))
                .collect::<Result<Vec<_>, _>>()?;
            let mean = if errors.is_empty() { 0.0 } else { errors.iter().sum::<f64>() / errors.len() as f64 };
            let mean_spectral_norm =
                if spectral.test_functions == 0 { 0.0 } else { mean_spectral_norm(model, set, &data.y_grid, spectral)? };
            rows.push(ReportRow {
                experiment: experiment.to_string(),
                model: name.to_string(),
                dataset: which,
                errors,
                mean_rel_l2: mean,
                mean_spectral_norm,
                c_emp_p50: p50,
                c_emp_p95: p95,
            });
        }
    }
    Ok(StabilityReport { rows })
}

impl StabilityReport {
    pub fn row(&self, model: &str, dataset: DatasetKind) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.model == model && r.dataset == dataset)
    }

    pub const ERRORS_HEADER: [&'static str; 5] = ["experiment", "model", "dataset", "sample_id", "relative_l2"];
    pub const SUMMARY_HEADER: [&'static str; 7] =
        ["experiment", "model", "dataset", "mean_rel_l2", "mean_spectral_norm", "c_emp_p50", "c_emp_p95"];

    pub fn write_errors_csv<W: Write>(&self, out: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::ERRORS_HEADER)?;
        for r in &self.rows {
            for (i, e) in r.errors.iter().enumerate() {
                w.write_record(&[r.experiment.clone(), r.model.clone(), r.dataset.as_str().into(), i.to_string(), e.to_string()])?;
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::SUMMARY_HEADER)?;
        for r in &self.rows {
            w.write_record(&[
                r.experiment.clone(),
                r.model.clone(),
                r.dataset.as_str().into(),
                r.mean_rel_l2.to_string(),
                r.mean_spectral_norm.to_string(),
                r.c_emp_p50.to_string(),
                r.c_emp_p95.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

pub const PLOT_HEADER: [&str; 11] = [
    "sample_id",
    "x",
    "y",
    "f",
    "f_tilde",
    "u_true",
    "u_tilde_true",
    "pred_baseline",
    "pred_stable",
    "pred_baseline_attacked",
    "pred_stable_attacked",
];

/// Plot data for the first `n_plot` samples on the evaluation grid.
/// Inputs are interpolated from the sensors onto the grid; `y` is empty
/// for one-dimensional grids.
pub fn write_plot_csv<W: Write>(
    problem: &Problem,
    data: &EvalDatasets,
    baseline: &ModelPredictions,
    stable: &ModelPredictions,
    n_plot: usize,
    out: W,
) -> Result<(), EvalError> {
    let interp = problem.sensors().interpolation_matrix(&data.y_grid);
    let on_grid = |f: &[f64]| -> Vec<f64> {
        let row = Array2::from_shape_vec((1, f.len()), f.to_vec()).expect("row shape");
        row.dot(&interp).iter().copied().collect()
    };
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PLOT_HEADER)?;
    for i in 0..n_plot.min(data.len()) {
        let (b, r) = (&data.base[i], &data.robustness[i]);
        let (f, ft) = (on_grid(&b.f), on_grid(&r.f));
        for k in 0..data.y_grid.nrows() {
            let y = if data.y_grid.ncols() > 1 { data.y_grid[(k, 1)].to_string() } else { String::new() };
            w.write_record(&[
                i.to_string(),
                data.y_grid[(k, 0)].to_string(),
                y,
                f[k].to_string(),
                ft[k].to_string(),
                b.u_true[k].to_string(),
                r.u_true[k].to_string(),
                baseline.base[(i, k)].to_string(),
                stable.base[(i, k)].to_string(),
                baseline.robustness[(i, k)].to_string(),
                stable.robustness[(i, k)].to_string(),
            ])?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkit::{Tape, Var};

    struct Diag(Vec<f64>);

    impl VectorFunction for Diag {
        fn input_dim(&self) -> usize {
            self.0.len()
        }
        fn output_dim(&self) -> usize {
            self.0.len()
        }
        fn record<T: crate::diffkit::Real>(&self, tape: &mut Tape<T>, input: Var) -> Result<Var, DiffError> {
            let d = tape.constant(Array2::from_shape_fn((1, self.0.len()), |(_, j)| T::from_f64(self.0[j])));
            tape.mul(input, d)
        }
    }

    #[test]
    fn relative_l2_examples() {
        assert_eq!(relative_l2(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((relative_l2(&[2.0, 4.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(relative_l2(&[1.0], &[0.0]), Err(EvalError::ZeroNormTruth)));
        assert!(relative_l2(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert!((quantile(&[0.0, 10.0], 0.95) - 9.5).abs() < 1e-12);
        assert_eq!(quantile(&[], 0.5), 0.0);
    }

    #[test]
    fn diagonal_jacobian_norm() {
        let f = Diag(vec![3.0, 1.0]);
        let est = power_spectral_norm(&f, &[0.2, -0.4], 1e-10, 500, 0).unwrap();
        assert!((est.spectral_norm - 3.0).abs() < 1e-8);
        assert!((dense_spectral_norm(&f, &[0.2, -0.4]).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_jacobian_is_zero() {
        let est = power_spectral_norm(&Diag(vec![0.0, 0.0]), &[1.0, 1.0], 1e-6, 10, 0).unwrap();
        assert_eq!(est.spectral_norm, 0.0);
    }

    #[test]
    fn non_convergence_reports_last_estimate() {
        let err = power_spectral_norm(&Diag(vec![1.0, 0.999_999]), &[1.0, 1.0], 0.0, 3, 5).unwrap_err();
        assert!(matches!(err, EvalError::NoConvergence { iterations: 3, last_estimate } if last_estimate > 0.99));
    }

    #[test]
    fn jacobi_eigenvalues_of_small_matrix() {
        let a = Array2::from_shape_vec((2, 2), vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let mut e = symmetric_eigenvalues(a);
        e.sort_by(f64::total_cmp);
        assert!((e[0] - 1.0).abs() < 1e-14 && (e[1] - 3.0).abs() < 1e-14);
    }
}
