use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stablepde::cli::RunConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stablepde"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let text = format!(
        r#"seed = 3

[problem]
kind = "antiderivative"
sensor_count = 10
collocation = {{ interior = 12, boundary = 0, initial = 1 }}
eval_points = 9

[arch]
branch_widths = [10, 8, 6]
trunk_widths = [1, 8, 6]

[train]
steps = 6
batch_size = 3
checkpoint_every = 3

[attack]
n_iter = 3

[eval]
n_samples = 4
plot_samples = 2

[eval.attack]
n_iter = 3

[eval.spectral]
test_functions = 2

[output]
dir = "{}"
"#,
        dir.join("out").display()
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn selftest_passes_and_override_fails() {
    let out = run(&["selftest"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("check,value,tolerance,status"));
    assert!(!text.contains(",fail"));

    let out = run(&["selftest", "--tol", "poisson1d_fd_analytic=1e-30"]);
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stdout);
    let row = text.lines().find(|l| l.starts_with("poisson1d_fd_analytic")).unwrap();
    assert!(row.ends_with(",fail"));

    assert_eq!(run(&["selftest", "--tol", "no_such_check=1"]).status.code(), Some(1));
}

#[test]
fn invalid_configs_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("missing_problem.toml", "seed = 1\n", "problem"),
        ("missing_kind.toml", "[problem]\nsensor_count = 10\n", "problem.kind"),
        ("unknown_key.toml", "[problem]\nkind = \"poisson1d\"\nbogus = 2\n", "bogus"),
        ("bad_epsilon.toml", "[problem]\nkind = \"poisson1d\"\n[attack]\nepsilon = -1.0\n", "epsilon"),
    ];
    for (name, text, needle) in cases {
        let p = dir.path().join(name);
        fs::write(&p, text).unwrap();
        let out = run(&["train", "--config", s(&p)]);
        assert_eq!(out.status.code(), Some(1), "{name}");
        assert!(String::from_utf8_lossy(&out.stderr).contains(needle), "{name}");
    }
    assert_eq!(run(&["train", "--config", "/nonexistent/cfg.toml"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn config_round_trips_through_toml() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::load(&tiny_config(dir.path())).unwrap();
    let again = RunConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
    assert_eq!(cfg, again);
}

#[test]
fn train_is_reproducible_and_modes_differ_in_phases() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = run(&["train", "--config", s(&cfg)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stable = dir.path().join("out/stable");
    let first = fs::read(stable.join("checkpoint_final.json")).unwrap();
    assert!(stable.join("checkpoint_step_000003.json").exists());
    assert!(stable.join("resolved_config.toml").exists());
    assert_eq!(header(&stable.join("step_log.csv")), "step,phase,physics,bc,ic,total");
    assert!(run(&["train", "--config", s(&cfg)]).status.success());
    assert_eq!(fs::read(stable.join("checkpoint_final.json")).unwrap(), first);

    assert!(run(&["train", "--config", s(&cfg), "--mode", "baseline"]).status.success());
    let phases = |p: PathBuf| -> Vec<String> {
        fs::read_to_string(p).unwrap().lines().skip(1).map(|l| l.split(',').nth(1).unwrap().to_string()).collect()
    };
    let base = phases(dir.path().join("out/baseline/step_log.csv"));
    let stab = phases(stable.join("step_log.csv"));
    assert_eq!(base.len(), 6);
    assert!(base.iter().all(|p| p != "adversarial"));
    let adv: Vec<usize> = stab.iter().enumerate().filter(|(_, p)| *p == "adversarial").map(|(i, _)| i + 1).collect();
    assert_eq!(adv, vec![2, 4, 6]);
}

#[test]
fn evaluate_attack_jacobian_and_data_commands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    assert!(run(&["train", "--config", s(&cfg), "--mode", "baseline"]).status.success());
    assert!(run(&["train", "--config", s(&cfg)]).status.success());
    let out_dir = dir.path().join("out");
    let base = out_dir.join("baseline/checkpoint_final.json");
    let stable = out_dir.join("stable/checkpoint_final.json");

    let out = run(&["evaluate", "--config", s(&cfg), "--baseline", s(&base), "--stable", s(&stable)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let eval = out_dir.join("eval");
    assert_eq!(header(&eval.join("summary.csv")), "experiment,model,dataset,mean_rel_l2,mean_spectral_norm,c_emp_p50,c_emp_p95");
    assert_eq!(fs::read_to_string(eval.join("summary.csv")).unwrap().lines().count(), 5);
    assert_eq!(header(&eval.join("errors.csv")), "experiment,model,dataset,sample_id,relative_l2");
    assert_eq!(
        header(&eval.join("plot_data.csv")),
        "sample_id,x,y,f,f_tilde,u_true,u_tilde_true,pred_baseline,pred_stable,pred_baseline_attacked,pred_stable_attacked"
    );
    assert_eq!(header(&eval.join("attack_traces.csv")), "sample_id,iteration,loss");

    let out = run(&["attack", "--config", s(&cfg), "--checkpoint", s(&base)]);
    assert!(out.status.success());
    assert_eq!(header(&out_dir.join("attack/attacked_inputs.csv")), "sample_id,sensor,f,f_tilde");

    let out = run(&["jacobian", "--config", s(&cfg), "--checkpoint", s(&stable)]);
    assert!(out.status.success());
    let norms = fs::read_to_string(out_dir.join("jacobian/spectral_norms.csv")).unwrap();
    assert_eq!(norms.lines().next().unwrap(), "sample_id,spectral_norm,iterations,residual");
    assert_eq!(norms.lines().count(), 3);

    let out = run(&["generate-data", "--config", s(&cfg), "--checkpoint", s(&base)]);
    assert!(out.status.success());
    for f in ["base.csv", "robustness.csv"] {
        assert_eq!(header(&out_dir.join("data").join(f)), "sample_id,field,index,value");
    }
    assert!(out_dir.join("data/y_grid.csv").exists());

    let missing = out_dir.join("nope.json");
    assert_eq!(run(&["attack", "--config", s(&cfg), "--checkpoint", s(&missing)]).status.code(), Some(1));
}

#[test]
fn zero_epsilon_evaluation_gives_identical_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let text = fs::read_to_string(&cfg).unwrap().replace("[eval.attack]\nn_iter = 3", "[eval.attack]\nn_iter = 3\nepsilon = 0.0");
    fs::write(&cfg, text).unwrap();
    assert!(run(&["train", "--config", s(&cfg), "--mode", "baseline"]).status.success());
    let ck = dir.path().join("out/baseline/checkpoint_final.json");
    let out = run(&["evaluate", "--config", s(&cfg), "--baseline", s(&ck), "--stable", s(&ck)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(dir.path().join("out/eval/summary.csv")).unwrap();
    let rows: Vec<Vec<&str>> = summary.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    for pair in rows.chunks(2) {
        assert_eq!(pair[0][2], "base");
        assert_eq!(pair[1][2], "robustness");
        assert_eq!(pair[0][3..], pair[1][3..]);
    }
}
