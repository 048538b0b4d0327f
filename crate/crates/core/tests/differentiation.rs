mod common;

use common::*;
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stablepde::diffkit::{grad, Linearization, Tape};
use stablepde::operator_net::{ArchSpec, DeepOnetParams, OperatorMap, Transform};

fn composite(x: &[f64]) -> f64 {
    x.iter().enumerate().map(|(i, &v)| ((v * (i as f64 + 1.0)).tanh() * v.sin() + (0.3 * v).exp()).powi(2)).sum()
}

fn composite_tape(x: &[f64]) -> (f64, Vec<f64>) {
    let n = x.len();
    let mut tape = Tape::<f64>::new();
    let v = tape.leaf(Array2::from_shape_vec((1, n), x.to_vec()).unwrap());
    let k = tape.constant(Array2::from_shape_fn((1, n), |(_, j)| j as f64 + 1.0));
    let a = tape.mul(v, k).unwrap();
    let a = tape.tanh(a).unwrap();
    let s = tape.sin(v).unwrap();
    let b = tape.mul(a, s).unwrap();
    let e = tape.scale(v, 0.3).unwrap();
    let e = tape.exp(e).unwrap();
    let c = tape.add(b, e).unwrap();
    let c = tape.square(c).unwrap();
    let out = tape.sum(c).unwrap();
    let g = grad(&tape, out, &[v]).unwrap();
    (tape.value(out)[(0, 0)], g[0].iter().copied().collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn elementwise_chain_matches_central_differences(x in prop::collection::vec(-2.0f64..2.0, 1..8)) {
        let (value, g) = composite_tape(&x);
        prop_assert!((value - composite(&x)).abs() <= 1e-12 * value.abs().max(1.0));
        let h = 1e-6;
        for i in 0..x.len() {
            let mut p = x.clone();
            p[i] += h;
            let mut m = x.clone();
            m[i] -= h;
            let fd = (composite(&p) - composite(&m)) / (2.0 * h);
            prop_assert!((g[i] - fd).abs() <= 1e-6 * fd.abs().max(1.0), "i={} tape={} fd={}", i, g[i], fd);
        }
    }

    #[test]
    fn matmul_gradient_is_transposed_product(a in prop::collection::vec(-1.0f64..1.0, 6), b in prop::collection::vec(-1.0f64..1.0, 6)) {
        let mut tape = Tape::<f64>::new();
        let av = tape.leaf(Array2::from_shape_vec((2, 3), a.clone()).unwrap());
        let bv = tape.leaf(Array2::from_shape_vec((3, 2), b.clone()).unwrap());
        let c = tape.matmul(av, bv).unwrap();
        let out = tape.sum(c).unwrap();
        let g = grad(&tape, out, &[av, bv]).unwrap();
        let bm = Array2::from_shape_vec((3, 2), b).unwrap();
        let am = Array2::from_shape_vec((2, 3), a).unwrap();
        let ones = Array2::<f64>::ones((2, 2));
        prop_assert_eq!(&g[0], &ones.dot(&bm.t()));
        prop_assert_eq!(&g[1], &am.t().dot(&ones));
    }

    #[test]
    fn jvp_and_vjp_are_adjoint(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_net(seed, 1);
        let m = p.arch.sensor_count();
        let coords = random_matrix(&mut rng, 5, 1, 0.0, 1.0);
        let map = OperatorMap::new(&p, &coords).unwrap();
        let f = random_matrix(&mut rng, 1, m, -1.0, 1.0);
        let v = random_matrix(&mut rng, 1, m, -1.0, 1.0);
        let w = random_matrix(&mut rng, 1, 5, -1.0, 1.0);
        let mut lin = Linearization::new(&map, f.as_slice().unwrap()).unwrap();
        let jv = lin.jvp(v.as_slice().unwrap()).unwrap();
        let jtw = lin.vjp(w.as_slice().unwrap()).unwrap();
        let lhs: f64 = jv.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = jtw.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }
}

#[test]
fn random_operator_networks_match_finite_differences() {
    for seed in 0..20u64 {
        let dim = 1 + (seed % 2) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let p = random_net(seed, dim);
        let m = p.arch.sensor_count();
        let inputs = random_matrix(&mut rng, 2, m, -1.0, 1.0);
        let coords = random_matrix(&mut rng, 3, dim, 0.0, 1.0);
        let g = param_gradient_rel_err(&p, &inputs, &coords);
        assert!(g <= 1e-5, "seed {seed}: gradient rel err {g}");
        let f: Vec<f64> = inputs.row(0).to_vec();
        let d2 = second_derivative_rel_err(&p, &f, &coords);
        assert!(d2 <= 1e-4, "seed {seed}: second derivative rel err {d2}");
    }
}

#[test]
fn dense_jacobian_columns_match_finite_differences() {
    let p = random_net(77, 1);
    let coords = Array2::from_shape_fn((4, 1), |(i, _)| 0.2 * i as f64 + 0.1);
    let map = OperatorMap::new(&p, &coords).unwrap();
    let f: Vec<f64> = (0..p.arch.sensor_count()).map(|i| 0.1 * i as f64 - 0.2).collect();
    let jac = Linearization::new(&map, &f).unwrap().dense_jacobian().unwrap();
    let h = 1e-6;
    for j in 0..f.len() {
        let mut a = f.clone();
        a[j] += h;
        let mut b = f.clone();
        b[j] -= h;
        let (ua, ub) = (map.eval(&a).unwrap(), map.eval(&b).unwrap());
        for i in 0..4 {
            let fd = (ua[i] - ub[i]) / (2.0 * h);
            assert!((jac[(i, j)] - fd).abs() <= 1e-8, "({i},{j})");
        }
    }
}

#[test]
fn masked_outputs_keep_second_derivative_accuracy() {
    let arch = ArchSpec { transform: Transform::Dirichlet2dSpace, ..ArchSpec::standard(4, 2, Transform::None) };
    let arch = ArchSpec { branch_widths: vec![4, 6, 5], trunk_widths: vec![2, 6, 5], ..arch };
    let p = DeepOnetParams::init(&arch, 3).unwrap();
    let coords = Array2::from_shape_vec((2, 2), vec![0.3, 0.6, 0.8, 0.2]).unwrap();
    let err = second_derivative_rel_err(&p, &[0.5, -0.1, 0.7, 0.2], &coords);
    assert!(err <= 1e-4, "{err}");
}
