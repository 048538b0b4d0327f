mod common;

use common::{random_matrix, singular_values};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stablepde::adversarial::AttackConfig;
use stablepde::diffkit::{DiffError, Real, Tape, Var, VectorFunction};
use stablepde::eval_report::*;
use stablepde::operator_net::{ArchSpec, DeepOnetParams};
use stablepde::pde_suite::{Problem, ProblemKind};
use stablepde::reference_solvers::reference_solution;

/// `f ↦ A f` as a row-vector map.
struct Linear(Array2<f64>);

impl VectorFunction for Linear {
    fn input_dim(&self) -> usize {
        self.0.ncols()
    }

    fn output_dim(&self) -> usize {
        self.0.nrows()
    }

    fn record<T: Real>(&self, tape: &mut Tape<T>, input: Var) -> Result<Var, DiffError> {
        let at = tape.constant(self.0.t().mapv(T::from_f64));
        tape.matmul(input, at)
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn model(problem: &Problem, seed: u64) -> DeepOnetParams {
    let arch = ArchSpec::standard(problem.sensor_count(), problem.coord_dim(), problem.kind().default_transform());
    DeepOnetParams::init(&arch, seed).unwrap()
}

fn small_attack() -> AttackConfig {
    AttackConfig { n_iter: 5, ..AttackConfig::evaluation() }
}

#[test]
fn relative_l2_basics() {
    let t = [1.0, -2.0, 3.0];
    assert_eq!(relative_l2(&t, &t).unwrap(), 0.0);
    let twice: Vec<f64> = t.iter().map(|v| 2.0 * v).collect();
    assert!((relative_l2(&twice, &t).unwrap() - 1.0).abs() <= 1e-15);
    let p = [0.5, -1.0, 2.0];
    for c in [0.1, 3.0, -7.0] {
        let sp: Vec<f64> = p.iter().map(|v| c * v).collect();
        let st: Vec<f64> = t.iter().map(|v| c * v).collect();
        assert!((relative_l2(&sp, &st).unwrap() - relative_l2(&p, &t).unwrap()).abs() <= 1e-14);
    }
    assert!(matches!(relative_l2(&[1.0], &[0.0]), Err(EvalError::ZeroNormTruth)));
    assert!(matches!(relative_l2(&[1.0], &[1.0, 2.0]), Err(EvalError::LengthMismatch(1, 2))));
    assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
    assert_eq!(quantile(&[0.0, 10.0], 0.95), 9.5);
}

#[test]
fn known_singular_value() {
    let f = Linear(Array2::from_diag(&ndarray::arr1(&[3.0, 1.0])));
    let est = power_spectral_norm(&f, &[0.2, 0.4], 1e-12, 500, 0).unwrap();
    assert!((est.spectral_norm - 3.0).abs() <= 1e-9);
    assert!((dense_spectral_norm(&f, &[0.0, 0.0]).unwrap() - 3.0).abs() <= 1e-12);
}

#[test]
fn dense_and_power_estimates_match_svd() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for trial in 0..10 {
        let a = random_matrix(&mut rng, 5, 7, -1.0, 1.0);
        let sv = singular_values(&a)[0];
        let f = Linear(a.clone());
        let point = vec![0.0; 7];
        let dense = dense_spectral_norm(&f, &point).unwrap();
        assert!((dense - sv).abs() <= 1e-8, "trial {trial}: dense {dense} svd {sv}");
        let tol = 1e-10;
        let power = power_spectral_norm(&f, &point, tol, 5000, trial).unwrap();
        assert!(power.spectral_norm <= dense + 1e-8);
        assert!(power.residual < tol);
        for _ in 0..5 {
            let v = random_matrix(&mut rng, 7, 1, -1.0, 1.0);
            let jv = a.dot(&v);
            let ratio = l2(jv.as_slice().unwrap()) / l2(v.as_slice().unwrap());
            assert!(power.spectral_norm >= ratio - 1e-8);
        }
    }
}

#[test]
fn power_iteration_matches_dense_on_networks() {
    let problem = Problem::from_kind(ProblemKind::Antiderivative).unwrap();
    let p = model(&problem, 4);
    let grid = problem.eval_grid();
    let map = stablepde::operator_net::OperatorMap::new(&p, &grid).unwrap();
    let f = problem.sample_input(2).unwrap().values;
    let dense = dense_spectral_norm(&map, &f).unwrap();
    let power = jacobian_spectral_norm(&p, &f, &grid, 1e-10, 2000).unwrap();
    assert!((dense - power.spectral_norm).abs() <= 1e-6, "{dense} vs {}", power.spectral_norm);
}

#[test]
fn zero_epsilon_sets_and_rows_coincide() {
    let problem = Problem::from_kind(ProblemKind::Antiderivative).unwrap();
    let m = model(&problem, 1);
    let zero = AttackConfig { epsilon: 0.0, step_alpha: 0.0, ..small_attack() };
    let data = build_eval_datasets(&problem, &m, 8, &zero, 3).unwrap();
    assert_eq!(data.base, data.robustness);
    let spectral = SpectralOptions { test_functions: 3, ..SpectralOptions::default() };
    let report = stability_report("anti", &[("baseline", &m)], &data, &spectral).unwrap();
    assert_eq!(report.rows.len(), 2);
    let (b, r) = (&report.rows[0], &report.rows[1]);
    assert_eq!(b.errors, r.errors);
    assert_eq!(b.mean_rel_l2, r.mean_rel_l2);
    assert_eq!(b.mean_spectral_norm, r.mean_spectral_norm);
}

#[test]
fn attacked_inputs_stay_in_ball_and_poisson_response_is_bounded() {
    let problem = Problem::from_kind(ProblemKind::Poisson1d).unwrap();
    let m = model(&problem, 6);
    let attack = small_attack();
    let data = build_eval_datasets(&problem, &m, 6, &attack, 9).unwrap();
    assert_eq!(data.len(), 6);
    assert_eq!(data.traces.len(), 6);

    // Brute-force operator norm of the linear sensor-to-grid solve.
    let n = problem.sensor_count();
    let grid = problem.eval_grid();
    let mut k = Array2::zeros((grid.nrows(), n));
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = reference_solution(&problem, &e, &grid).unwrap();
        k.column_mut(j).assign(&ndarray::Array1::from(col));
    }
    let c_fd = singular_values(&k)[0];
    for (b, r) in data.base.iter().zip(&data.robustness) {
        let (eps, _) = attack.radius(&b.f);
        let df: Vec<f64> = b.f.iter().zip(&r.f).map(|(x, y)| y - x).collect();
        assert!(df.iter().all(|d| d.abs() <= eps + 1e-12));
        let du: Vec<f64> = b.u_true.iter().zip(&r.u_true).map(|(x, y)| y - x).collect();
        assert!(l2(&du) <= c_fd * l2(&df) * (1.0 + 1e-9) + 1e-15);
    }
}

#[test]
fn perfect_model_stub_scores_zero() {
    let problem = Problem::from_kind(ProblemKind::Antiderivative).unwrap();
    let m = model(&problem, 2);
    let mut data = build_eval_datasets(&problem, &m, 5, &small_attack(), 1).unwrap();
    let pred = predict(&m, &data).unwrap();
    for (i, s) in data.base.iter_mut().enumerate() {
        s.u_true = pred.base.row(i).to_vec();
    }
    let report = stability_report("anti", &[("stub", &m)], &data, &SpectralOptions { test_functions: 1, ..Default::default() }).unwrap();
    let base = report.row("stub", DatasetKind::Base).unwrap();
    assert!(base.errors.iter().all(|&e| e == 0.0));
    assert_eq!(base.mean_rel_l2, 0.0);
}

#[test]
fn permutation_and_model_order_only_reorder_results() {
    let problem = Problem::from_kind(ProblemKind::Antiderivative).unwrap();
    let a = model(&problem, 1);
    let b = model(&problem, 2);
    let data = build_eval_datasets(&problem, &a, 6, &small_attack(), 4).unwrap();
    let spectral = SpectralOptions { test_functions: 2, ..Default::default() };

    let order = [3, 0, 5, 1, 4, 2];
    let shuffled = data.permuted(&order);
    for (i, &o) in order.iter().enumerate() {
        assert_eq!(shuffled.base[i], data.base[o]);
        assert_eq!(shuffled.robustness[i], data.robustness[o]);
        assert_eq!(shuffled.traces[i], data.traces[o]);
    }
    let full = SpectralOptions { test_functions: 0, ..spectral };
    let r1 = stability_report("anti", &[("a", &a)], &data, &full).unwrap();
    let r2 = stability_report("anti", &[("a", &a)], &shuffled, &full).unwrap();
    for (x, y) in r1.rows.iter().zip(&r2.rows) {
        for (i, &o) in order.iter().enumerate() {
            assert_eq!(y.errors[i], x.errors[o]);
        }
    }

    let ab = stability_report("anti", &[("a", &a), ("b", &b)], &data, &spectral).unwrap();
    let ba = stability_report("anti", &[("b", &b), ("a", &a)], &data, &spectral).unwrap();
    assert_eq!(ab.rows.len(), 4);
    assert_eq!(ab.rows[0], ba.rows[2]);
    assert_eq!(ab.rows[1], ba.rows[3]);
    assert_eq!(ab.rows[2], ba.rows[0]);
    assert_eq!(ab.rows[3], ba.rows[1]);
}

#[test]
fn csv_outputs_have_documented_headers() {
    let problem = Problem::from_kind(ProblemKind::Antiderivative).unwrap();
    let a = model(&problem, 1);
    let data = build_eval_datasets(&problem, &a, 3, &small_attack(), 2).unwrap();
    let report = stability_report("anti", &[("baseline", &a), ("stable", &a)], &data, &SpectralOptions { test_functions: 1, ..Default::default() }).unwrap();
    let mut summary = Vec::new();
    report.write_summary_csv(&mut summary).unwrap();
    let summary = String::from_utf8(summary).unwrap();
    assert_eq!(summary.lines().next().unwrap(), StabilityReport::SUMMARY_HEADER.join(","));
    assert_eq!(summary.lines().count(), 5);
    let mut errors = Vec::new();
    report.write_errors_csv(&mut errors).unwrap();
    let errors = String::from_utf8(errors).unwrap();
    assert_eq!(errors.lines().next().unwrap(), StabilityReport::ERRORS_HEADER.join(","));
    assert_eq!(errors.lines().count(), 1 + 4 * 3);
    let mut plot = Vec::new();
    let pred = predict(&a, &data).unwrap();
    write_plot_csv(&problem, &data, &pred, &pred, 2, &mut plot).unwrap();
    let plot = String::from_utf8(plot).unwrap();
    assert_eq!(plot.lines().next().unwrap(), PLOT_HEADER.join(","));
    assert_eq!(plot.lines().count(), 1 + 2 * data.y_grid.nrows());
}
