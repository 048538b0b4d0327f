use std::collections::BTreeSet;

use ndarray::Array2;
use stablepde::adversarial::AttackConfig;
use stablepde::pde_suite::{CollocationCounts, ProblemKind, ProblemSpec};
use stablepde::training::*;

fn tiny(kind: ProblemKind, steps: usize, seed: u64) -> TrainConfig {
    let mut problem = ProblemSpec::new(kind);
    problem.sensor_count = 12;
    let d = kind.default_collocation();
    problem.collocation = CollocationCounts { interior: 16, boundary: d.boundary.min(8), initial: d.initial.min(8) };
    let mut cfg = TrainConfig::new(problem, steps, seed);
    cfg.batch_size = 4;
    cfg.arch.branch_widths = vec![12, 10, 8];
    cfg.arch.trunk_widths = vec![kind.coord_dim(), 10, 8];
    cfg
}

fn run(cfg: &TrainConfig) -> TrainOutcome {
    train(cfg, |_, _| {}).unwrap()
}

#[test]
fn zero_epsilon_training_matches_normal_training() {
    let cfg = tiny(ProblemKind::Poisson1d, 30, 3);
    let zero = TrainConfig { attack: AttackConfig { epsilon: 0.0, step_alpha: 0.0, ..cfg.attack }, ..cfg.clone() };
    let a = run(&zero);
    let b = run(&cfg.baseline());
    assert_eq!(a.params, b.params);
    let losses = |o: &TrainOutcome| o.log.records.iter().map(|r| r.loss).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));
    assert!(a.log.records.iter().any(|r| r.phase == Phase::Adversarial));
}

#[test]
fn full_warmup_has_no_attack_steps_and_equals_baseline() {
    let cfg = tiny(ProblemKind::Antiderivative, 25, 8);
    let warm = TrainConfig { warmup_fraction: 1.0, ..cfg.clone() };
    let a = run(&warm);
    assert!(a.log.records.iter().all(|r| r.phase != Phase::Adversarial));
    let b = train_baseline(&cfg, |_, _| {}).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.log.records, b.log.records);
}

#[test]
fn adversarial_steps_follow_the_schedule() {
    for (warmup, cadence, n) in [(0.2, 2, 40), (0.5, 3, 31), (0.0, 1, 10), (0.1, 4, 50)] {
        let cfg = TrainConfig { warmup_fraction: warmup, adversarial_cadence: cadence, ..tiny(ProblemKind::Poisson1d, n, 1) };
        let want: BTreeSet<usize> = (1..=n).filter(|&j| j as f64 > warmup * n as f64 && j % cadence == 0).collect();
        let got: BTreeSet<usize> = (1..=n).filter(|&j| cfg.phase(j) == Phase::Adversarial).collect();
        assert_eq!(got, want, "warmup {warmup} cadence {cadence}");
    }
    let out = run(&tiny(ProblemKind::Poisson1d, 20, 1));
    let logged: Vec<usize> = out.log.records.iter().filter(|r| r.phase == Phase::Adversarial).map(|r| r.step).collect();
    assert_eq!(logged, vec![6, 8, 10, 12, 14, 16, 18, 20]);
}

#[test]
fn log_has_one_row_per_step_with_consistent_totals() {
    for kind in [ProblemKind::Poisson1d, ProblemKind::HeatIc, ProblemKind::HelmholtzNeumann] {
        let out = run(&tiny(kind, 12, 2));
        assert_eq!(out.log.records.len(), 12);
        for (i, r) in out.log.records.iter().enumerate() {
            assert_eq!(r.step, i + 1);
            assert_eq!(r.loss.total, r.loss.physics + r.loss.bc + r.loss.ic);
        }
        let mut buf = Vec::new();
        out.log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), TrainingLog::HEADER.join(","));
        assert_eq!(text.lines().count(), 13);
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let cfg = tiny(ProblemKind::HeatSource, 10, 21);
    assert_eq!(run(&cfg).params, run(&cfg).params);
    let other = TrainConfig { seed: 22, ..cfg.clone() };
    assert_ne!(run(&cfg).params, run(&other).params);
}

#[test]
fn sink_sees_every_step_and_final_params() {
    let cfg = tiny(ProblemKind::Poisson1d, 7, 5);
    let mut seen = Vec::new();
    let mut last = None;
    let out = train(&cfg, |r, p| {
        seen.push(r.step);
        last = Some(p.clone());
    })
    .unwrap();
    assert_eq!(seen, (1..=7).collect::<Vec<_>>());
    assert_eq!(last.unwrap(), out.params);
}

#[test]
fn divergence_aborts_with_last_good_checkpoint() {
    let cfg = TrainConfig { learning_rate: 1e200, ..tiny(ProblemKind::Poisson1d, 50, 4) };
    match train(&cfg, |_, _| {}) {
        Err(TrainError::NonFiniteLoss { step, last_good }) => {
            assert!(step >= 2);
            assert_eq!(last_good.step, (step - 1) as u64);
            assert_eq!(last_good.seed, 4);
        }
        Err(TrainError::NonFiniteGradient { .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log.records.len())),
    }
}

#[test]
fn adam_first_update_matches_hand_formula() {
    let hyper = AdamHyper { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
    let p = vec![Array2::from_elem((1, 1), 0.5)];
    let g = vec![Array2::from_elem((1, 1), 1.0)];
    let (next, state) = adam_step(&p, &g, &AdamState::new(&p), hyper, &["w".into()]).unwrap();
    let want = 0.5 - 1e-3 * 1.0 / (1.0 + 1e-8);
    assert!((next[0][(0, 0)] - want).abs() <= 1e-15);
    assert_eq!(state.t, 1);
    let zero = vec![Array2::zeros((1, 1))];
    let (same, state) = adam_step(&p, &zero, &AdamState::new(&p), hyper, &["w".into()]).unwrap();
    assert_eq!(same, p);
    assert_eq!(state.t, 1);
}

#[test]
fn invalid_configs_are_rejected() {
    let cfg = tiny(ProblemKind::Poisson1d, 10, 0);
    for bad in [
        TrainConfig { steps: 0, ..cfg.clone() },
        TrainConfig { batch_size: 0, ..cfg.clone() },
        TrainConfig { learning_rate: -1.0, ..cfg.clone() },
        TrainConfig { warmup_fraction: 1.5, ..cfg.clone() },
        TrainConfig { adversarial_cadence: 0, ..cfg.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))), "{bad:?}");
    }
}
