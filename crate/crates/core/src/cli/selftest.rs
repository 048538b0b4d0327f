//! Fast oracle suite behind `stablepde selftest`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::CliError;
use crate::adversarial::{attack_evaluation, perturbation_norm, project, AttackConfig, EpsilonScale, NormKind};
use crate::diffkit::Tape;
use crate::eval_report::{dense_spectral_norm, power_spectral_norm};
use crate::operator_net::{Activation, ArchSpec, Checkpoint, DeepOnetParams, JetRequest, OperatorMap, Transform};
use crate::reference_solvers::{
    solve_heat_fd, solve_helmholtz_neumann_fd, solve_ode_rk45, solve_poisson_1d_fd, HeatMode, TimeScheme,
};

type Oracle = fn() -> Result<f64, String>;

/// A named measurement that passes when `value ≤ tolerance`.
pub struct Check {
    pub name: &'static str,
    pub tolerance: f64,
    pub run: Oracle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelftestRow {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn checks() -> Vec<Check> {
    vec![
        Check { name: "param_gradient_fd", tolerance: 1e-5, run: param_gradient_fd },
        Check { name: "coord_second_derivative_fd", tolerance: 1e-4, run: coord_second_derivative_fd },
        Check { name: "poisson1d_fd_analytic", tolerance: 1e-5, run: poisson1d_fd_analytic },
        Check { name: "helmholtz_neumann_analytic", tolerance: 1e-4, run: helmholtz_neumann_analytic },
        Check { name: "heat_cn_analytic", tolerance: 1e-4, run: heat_cn_analytic },
        Check { name: "rk45_antiderivative", tolerance: 2e-4, run: rk45_antiderivative },
        Check { name: "projection_ball", tolerance: 1e-12, run: projection_ball },
        Check { name: "attack_zero_epsilon_identity", tolerance: 0.0, run: attack_zero_epsilon_identity },
        Check { name: "spectral_power_vs_dense", tolerance: 1e-6, run: spectral_power_vs_dense },
        Check { name: "checkpoint_round_trip", tolerance: 0.0, run: checkpoint_round_trip },
    ]
}

/// Runs every check; `overrides` replaces tolerances by check name.
pub fn run_selftest(overrides: &BTreeMap<String, f64>) -> Result<Vec<SelftestRow>, CliError> {
    let all = checks();
    for name in overrides.keys() {
        if !all.iter().any(|c| c.name == name) {
            return Err(CliError::Validation(format!("unknown selftest check `{name}`")));
        }
    }
    Ok(all
        .into_iter()
        .map(|c| {
            let tolerance = overrides.get(c.name).copied().unwrap_or(c.tolerance);
            let value = (c.run)().unwrap_or_else(|e| {
                log::error!("{}: {e}", c.name);
                f64::NAN
            });
            SelftestRow { name: c.name.to_string(), value, tolerance, passed: value <= tolerance }
        })
        .collect())
}

/// `check,value,tolerance,status` rows.
pub fn write_table<W: Write>(rows: &[SelftestRow], out: W) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["check", "value", "tolerance", "status"]).map_err(CliError::from)?;
    for r in rows {
        w.write_record(&[
            r.name.clone(),
            format!("{:e}", r.value),
            format!("{:e}", r.tolerance),
            (if r.passed { "pass" } else { "fail" }).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn small_net(seed: u64, m: usize, dim: usize) -> Result<DeepOnetParams, String> {
    let arch = ArchSpec {
        branch_widths: vec![m, 8, 6],
        trunk_widths: vec![dim, 8, 6],
        activation: Activation::Tanh,
        transform: Transform::None,
    };
    DeepOnetParams::init(&arch, seed).map_err(|e| e.to_string())
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

fn err<E: ToString>(e: E) -> String {
    e.to_string()
}

fn sum_of_squares(params: &DeepOnetParams, inputs: &Array2<f64>, coords: &Array2<f64>) -> Result<f64, String> {
    Ok(params.forward_batch(inputs, coords).map_err(err)?.iter().map(|v| v * v).sum())
}

fn param_gradient_fd() -> Result<f64, String> {
    let params = small_net(3, 4, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = random_matrix(&mut rng, 2, 4);
    let coords = random_matrix(&mut rng, 3, 1);
    let mut tape = Tape::<f64>::new();
    let vars = params.register(&mut tape, true);
    let x = tape.constant(inputs.clone());
    let field = params.record_field(&mut tape, &vars, x, &coords, JetRequest::VALUE).map_err(err)?;
    let sq = tape.square(field.value).map_err(err)?;
    let loss = tape.sum(sq).map_err(err)?;
    let mut grads = tape.backward(loss).map_err(err)?;
    let analytic = params.collect_gradients(&mut grads, &vars);
    let blocks = params.blocks();
    let h = 1e-6;
    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    for (b, block) in blocks.iter().enumerate() {
        for idx in 0..block.len() {
            let (r, c) = (idx / block.ncols(), idx % block.ncols());
            let mut plus = blocks.clone();
            plus[b][(r, c)] += h;
            let mut minus = blocks.clone();
            minus[b][(r, c)] -= h;
            let fp = sum_of_squares(&params.with_blocks(&plus).map_err(err)?, &inputs, &coords)?;
            let fm = sum_of_squares(&params.with_blocks(&minus).map_err(err)?, &inputs, &coords)?;
            let fd = (fp - fm) / (2.0 * h);
            diff = diff.max((analytic[b][(r, c)] - fd).abs());
            scale = scale.max(fd.abs());
        }
    }
    Ok(diff / scale.max(f64::MIN_POSITIVE))
}

fn coord_second_derivative_fd() -> Result<f64, String> {
    let params = small_net(5, 4, 2)?;
    let f = [0.3, -0.2, 0.8, 0.1];
    let h = 1e-4;
    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    for &(x, y) in &[(0.2, 0.7), (0.5, 0.5), (0.9, 0.1)] {
        for axis in 0..2 {
            let at = |dx: f64| -> Result<f64, String> {
                let mut c = [x, y];
                c[axis] += dx;
                Ok(params.forward(&f, &Array2::from_shape_vec((1, 2), c.to_vec()).map_err(err)?).map_err(err)?[0])
            };
            let fd = (at(h)? - 2.0 * at(0.0)? + at(-h)?) / (h * h);
            let ad = params.second_coordinate_derivative(&f, &[x, y], axis).map_err(err)?;
            diff = diff.max((ad - fd).abs());
            scale = scale.max(fd.abs());
        }
    }
    Ok(diff / scale.max(f64::MIN_POSITIVE))
}

fn max_abs_diff(a: &[f64], b: impl Fn(usize) -> f64) -> f64 {
    a.iter().enumerate().fold(0.0, |m, (i, v)| m.max((v - b(i)).abs()))
}

fn poisson1d_fd_analytic() -> Result<f64, String> {
    let s = solve_poisson_1d_fd(|x| PI * PI * (PI * x).sin(), 1001).map_err(err)?;
    let xs = &s.axes[0];
    Ok(max_abs_diff(&s.values, |i| (PI * xs[i]).sin()))
}

fn helmholtz_neumann_analytic() -> Result<f64, String> {
    let s = solve_helmholtz_neumann_fd(|x| (2.0 + PI * PI) * (PI * x).cos(), 2.0, 1001).map_err(err)?;
    let xs = &s.axes[0];
    Ok(max_abs_diff(&s.values, |i| (PI * xs[i]).cos()))
}

fn heat_cn_analytic() -> Result<f64, String> {
    let alpha = 0.01;
    let s = solve_heat_fd(HeatMode::InitialCondition, |x| (PI * x).sin(), alpha, 401, 401, 1.0, TimeScheme::CrankNicolson)
        .map_err(err)?;
    let pts = s.points();
    Ok(max_abs_diff(&s.values, |k| (-alpha * PI * PI * pts[(k, 1)]).exp() * (PI * pts[(k, 0)]).sin()))
}

fn rk45_antiderivative() -> Result<f64, String> {
    let grid: Vec<f64> = (1..=50).map(|i| i as f64 / 50.0).collect();
    let s = solve_ode_rk45(|x| (2.0 * PI * x).cos(), &grid).map_err(err)?;
    Ok(max_abs_diff(&s.values, |i| (2.0 * PI * grid[i]).sin() / (2.0 * PI)))
}

fn projection_ball() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let f: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
        let eps = rng.random_range(0.0..1.0);
        for norm in [NormKind::Linf, NormKind::L2] {
            let p = project(&g, &f, eps, norm);
            worst = worst.max(perturbation_norm(&p, &f, norm) - eps);
            let pp = project(&p, &f, eps, norm);
            worst = worst.max(perturbation_norm(&pp, &p, NormKind::Linf));
        }
    }
    Ok(worst.max(0.0))
}

fn attack_zero_epsilon_identity() -> Result<f64, String> {
    let params = small_net(7, 4, 1)?;
    let coords = Array2::from_shape_vec((3, 1), vec![0.1, 0.5, 0.9]).map_err(err)?;
    let f = [0.4, -0.3, 0.2, 0.9];
    let u = [1.0, 2.0, 3.0];
    let cfg = AttackConfig { epsilon: 0.0, step_alpha: 0.0, scale: EpsilonScale::Absolute, ..AttackConfig::evaluation() };
    let (ft, _) = attack_evaluation(&params, &f, &u, &coords, &cfg).map_err(err)?;
    Ok(if ft == f { 0.0 } else { perturbation_norm(&ft, &f, NormKind::Linf).max(f64::MIN_POSITIVE) })
}

fn spectral_power_vs_dense() -> Result<f64, String> {
    let params = small_net(9, 5, 1)?;
    let coords = Array2::from_shape_fn((7, 1), |(i, _)| i as f64 / 6.0);
    let map = OperatorMap::new(&params, &coords).map_err(err)?;
    let f = [0.1, 0.2, -0.4, 0.3, 0.0];
    let p = power_spectral_norm(&map, &f, 1e-12, 5000, 0).map_err(err)?;
    let d = dense_spectral_norm(&map, &f).map_err(err)?;
    Ok((p.spectral_norm - d).abs())
}

fn checkpoint_round_trip() -> Result<f64, String> {
    let params = small_net(13, 4, 2)?;
    let ck = Checkpoint { params: params.clone(), seed: 13, step: 7 };
    let back = Checkpoint::from_json(&ck.to_json().map_err(err)?).map_err(err)?;
    let worst = params
        .blocks()
        .iter()
        .zip(back.params.blocks())
        .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max);
    Ok(if back == ck { worst } else { worst.max(f64::MIN_POSITIVE) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        let rows = run_selftest(&BTreeMap::new()).unwrap();
        for r in &rows {
            assert!(r.passed, "{} = {} > {}", r.name, r.value, r.tolerance);
        }
    }

    #[test]
    fn tightened_tolerance_fails_its_row() {
        let mut o = BTreeMap::new();
        o.insert("poisson1d_fd_analytic".to_string(), 1e-30);
        let rows = run_selftest(&o).unwrap();
        for r in rows {
            assert_eq!(r.passed, r.name != "poisson1d_fd_analytic", "{}", r.name);
        }
        o.insert("nope".to_string(), 1.0);
        assert!(run_selftest(&o).is_err());
    }
}
