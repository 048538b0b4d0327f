//! Oracles shared by the integration tests. Everything here is computed
//! independently of the library's own derivative and linear-algebra code.

#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stablepde::diffkit::Tape;
use stablepde::operator_net::{Activation, ArchSpec, DeepOnetParams, JetRequest, Transform};

/// Small random architecture with `dim` coordinates.
pub fn random_arch(rng: &mut ChaCha8Rng, dim: usize) -> ArchSpec {
    let m = rng.random_range(2..7);
    let p = rng.random_range(2..6);
    let hidden = rng.random_range(2..7);
    ArchSpec {
        branch_widths: vec![m, hidden, p],
        trunk_widths: vec![dim, rng.random_range(2..7), p],
        activation: Activation::Tanh,
        transform: Transform::None,
    }
}

/// Random network whose biases are also non-zero, so every parameter
/// carries gradient signal.
pub fn random_net(seed: u64, dim: usize) -> DeepOnetParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = random_arch(&mut rng, dim);
    let p = DeepOnetParams::init(&arch, seed).unwrap();
    let blocks: Vec<_> = p.blocks().into_iter().map(|b| b.mapv(|v| v + rng.random_range(-0.3..0.3))).collect();
    p.with_blocks(&blocks).unwrap()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(lo..hi))
}

fn objective(p: &DeepOnetParams, inputs: &Array2<f64>, coords: &Array2<f64>) -> f64 {
    p.forward_batch(inputs, coords).unwrap().iter().map(|v| v * v).sum::<f64>() * 0.5
}

/// `‖g_tape − g_fd‖∞ / ‖g_fd‖∞` for `½Σ G(f)(y)²` over all parameters.
pub fn param_gradient_rel_err(p: &DeepOnetParams, inputs: &Array2<f64>, coords: &Array2<f64>) -> f64 {
    let mut tape = Tape::<f64>::new();
    let vars = p.register(&mut tape, true);
    let x = tape.constant(inputs.clone());
    let u = p.record_field(&mut tape, &vars, x, coords, JetRequest::VALUE).unwrap().value;
    let sq = tape.square(u).unwrap();
    let s = tape.sum(sq).unwrap();
    let loss = tape.scale(s, 0.5).unwrap();
    let mut grads = tape.backward(loss).unwrap();
    let tape_grads = p.collect_gradients(&mut grads, &vars);
    let blocks = p.blocks();
    let h = 1e-6;
    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    for (b, block) in blocks.iter().enumerate() {
        for r in 0..block.nrows() {
            for c in 0..block.ncols() {
                let mut plus = blocks.clone();
                plus[b][(r, c)] += h;
                let mut minus = blocks.clone();
                minus[b][(r, c)] -= h;
                let fd = (objective(&p.with_blocks(&plus).unwrap(), inputs, coords)
                    - objective(&p.with_blocks(&minus).unwrap(), inputs, coords))
                    / (2.0 * h);
                diff = diff.max((tape_grads[b][(r, c)] - fd).abs());
                scale = scale.max(fd.abs());
            }
        }
    }
    diff / scale
}

/// `‖∂²u/∂y_a² − FD‖∞ / ‖FD‖∞` over the rows of `coords` and every axis.
pub fn second_derivative_rel_err(p: &DeepOnetParams, f: &[f64], coords: &Array2<f64>) -> f64 {
    let h = 1e-4;
    let dim = coords.ncols();
    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    for row in coords.rows() {
        for axis in 0..dim {
            let eval = |dx: f64| {
                let mut c = row.to_vec();
                c[axis] += dx;
                p.forward(f, &Array2::from_shape_vec((1, dim), c).unwrap()).unwrap()[0]
            };
            let fd = (eval(h) - 2.0 * eval(0.0) + eval(-h)) / (h * h);
            let ad = p.second_coordinate_derivative(f, &row.to_vec(), axis).unwrap();
            diff = diff.max((ad - fd).abs());
            scale = scale.max(fd.abs());
        }
    }
    diff / scale
}

/// Singular values by one-sided Jacobi rotations on the columns.
pub fn singular_values(a: &Array2<f64>) -> Vec<f64> {
    let mut u = if a.nrows() >= a.ncols() { a.clone() } else { a.t().to_owned() };
    let n = u.ncols();
    for _ in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for k in 0..u.nrows() {
                    alpha += u[(k, p)] * u[(k, p)];
                    beta += u[(k, q)] * u[(k, q)];
                    gamma += u[(k, p)] * u[(k, q)];
                }
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..u.nrows() {
                    let up = u[(k, p)];
                    let uq = u[(k, q)];
                    u[(k, p)] = c * up - s * uq;
                    u[(k, q)] = s * up + c * uq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..n).map(|j| u.column(j).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Least-squares slope of `log(err)` against `log(h)`.
pub fn loglog_slope(hs: &[f64], errs: &[f64]) -> f64 {
    let xs: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    num / den
}
