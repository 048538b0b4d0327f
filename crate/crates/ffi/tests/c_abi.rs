use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use stablepde_ffi::*;

fn last_error() -> String {
    let p = spd_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn model(kind: &str, seed: u64) -> *mut SpdModel {
    let k = CString::new(kind).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { spd_model_init(k.as_ptr(), seed, &mut m) }, SpdStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn predict_matches_library() {
    let m = model("poisson1d", 4);
    let mut n = 0usize;
    assert_eq!(unsafe { spd_model_sensor_count(m, &mut n) }, SpdStatus::Ok);
    assert_eq!(n, 100);
    let f: Vec<f64> = (0..n).map(|i| (i as f64 * 0.1).sin()).collect();
    let ys = [0.0, 0.25, 0.5];
    let mut out = [0.0; 3];
    let st = unsafe { spd_model_predict(m, f.as_ptr(), f.len(), ys.as_ptr(), 3, 1, out.as_mut_ptr()) };
    assert_eq!(st, SpdStatus::Ok);

    let spec = stablepde::pde_suite::ProblemSpec::new(stablepde::pde_suite::ProblemKind::Poisson1d);
    let arch = stablepde::operator_net::ArchSpec::standard(100, 1, spec.kind.default_transform());
    let params = stablepde::operator_net::DeepOnetParams::init(&arch, 4).unwrap();
    let coords = ndarray::Array2::from_shape_vec((3, 1), ys.to_vec()).unwrap();
    assert_eq!(params.forward(&f, &coords).unwrap(), out.to_vec());
    unsafe { spd_model_free(m) };
}

#[test]
fn errors_set_status_and_message() {
    let bad = CString::new("navier_stokes").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { spd_model_init(bad.as_ptr(), 0, &mut m) }, SpdStatus::InvalidArgument);
    assert!(last_error().contains("navier_stokes"));
    assert!(m.is_null());

    assert_eq!(unsafe { spd_model_init(ptr::null(), 0, &mut m) }, SpdStatus::NullPointer);

    let m = model("antiderivative", 1);
    let f = [0.0; 3];
    let ys = [0.5];
    let mut out = [0.0];
    let st = unsafe { spd_model_predict(m, f.as_ptr(), 3, ys.as_ptr(), 1, 1, out.as_mut_ptr()) };
    assert_eq!(st, SpdStatus::Shape);
    assert!(last_error().contains("length 3"));
    let st = unsafe { spd_model_predict(m, f.as_ptr(), 3, ys.as_ptr(), 1, 2, out.as_mut_ptr()) };
    assert_eq!(st, SpdStatus::Shape);
    unsafe { spd_model_free(m) };
    unsafe { spd_model_free(ptr::null_mut()) };
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.json").to_str().unwrap()).unwrap();
    let m = model("heat_source", 2);
    assert_eq!(unsafe { spd_model_save(m, path.as_ptr()) }, SpdStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { spd_model_load(path.as_ptr(), &mut back) }, SpdStatus::Ok);
    let mut dim = 0;
    assert_eq!(unsafe { spd_model_coord_dim(back, &mut dim) }, SpdStatus::Ok);
    assert_eq!(dim, 2);
    let f = vec![0.3; 100];
    let ys = [0.2, 0.4, 0.9, 0.1];
    let (mut a, mut b) = ([0.0; 2], [0.0; 2]);
    unsafe {
        assert_eq!(spd_model_predict(m, f.as_ptr(), 100, ys.as_ptr(), 2, 2, a.as_mut_ptr()), SpdStatus::Ok);
        assert_eq!(spd_model_predict(back, f.as_ptr(), 100, ys.as_ptr(), 2, 2, b.as_mut_ptr()), SpdStatus::Ok);
        spd_model_free(m);
        spd_model_free(back);
    }
    assert_eq!(a, b);
    let missing = CString::new(dir.path().join("nope.json").to_str().unwrap()).unwrap();
    let mut none = ptr::null_mut();
    assert_eq!(unsafe { spd_model_load(missing.as_ptr(), &mut none) }, SpdStatus::Io);
}

#[test]
fn problem_sampling_reference_and_attack() {
    let k = CString::new("poisson1d").unwrap();
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { spd_problem_new(k.as_ptr(), &mut p) }, SpdStatus::Ok);
    let mut n = 0;
    assert_eq!(unsafe { spd_problem_sensor_count(p, &mut n) }, SpdStatus::Ok);
    let mut f = vec![0.0; n];
    assert_eq!(unsafe { spd_problem_sample_input(p, 7, f.as_mut_ptr(), n) }, SpdStatus::Ok);
    let ys: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
    let mut u = vec![0.0; 11];
    let st = unsafe { spd_problem_reference_solution(p, f.as_ptr(), n, ys.as_ptr(), 11, 1, u.as_mut_ptr()) };
    assert_eq!(st, SpdStatus::Ok);
    assert!(u[0].abs() < 1e-12 && u[10].abs() < 1e-12);

    let m = model("poisson1d", 0);
    let mut ft = vec![0.0; n];
    let st = unsafe { spd_attack_evaluation(m, f.as_ptr(), n, u.as_ptr(), ys.as_ptr(), 11, 1, 0.1, 5, ft.as_mut_ptr()) };
    assert_eq!(st, SpdStatus::Ok);
    let eps = 0.1 * f.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    assert!(f.iter().zip(&ft).all(|(a, b)| (a - b).abs() <= eps + 1e-15));

    let mut sigma = -1.0;
    let st = unsafe { spd_model_spectral_norm(m, f.as_ptr(), n, ys.as_ptr(), 11, 1, 1e-6, 500, &mut sigma) };
    assert_eq!(st, SpdStatus::Ok);
    assert!(sigma > 0.0);
    unsafe {
        spd_model_free(m);
        spd_problem_free(p);
    }
}

#[test]
fn config_validation_through_abi() {
    let ok = CString::new("[problem]\nkind = \"antiderivative\"\n").unwrap();
    assert_eq!(unsafe { spd_config_validate(ok.as_ptr()) }, SpdStatus::Ok);
    let bad = CString::new("[problem]\nkind = \"antiderivative\"\nbogus = 1\n").unwrap();
    assert_eq!(unsafe { spd_config_validate(bad.as_ptr()) }, SpdStatus::InvalidArgument);
    assert!(last_error().contains("bogus"));
    let v = unsafe { CStr::from_ptr(spd_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

/// Compiles a C program against the generated header and the static
/// library when a C compiler and the archive are present.
#[test]
fn c_program_links_against_header() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header_dir = manifest.join("include");
    assert!(header_dir.join("stablepde.h").exists());
    let target = manifest.join("../../target/debug");
    let lib = target.join("libstablepde_ffi.a");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping C link check: no static library or C compiler");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include "stablepde.h"
#include <stdio.h>
int main(void) {
    SpdModel *m = NULL;
    if (spd_model_init("antiderivative", 1, &m) != SPD_STATUS_OK) return 1;
    size_t n = 0;
    spd_model_sensor_count(m, &n);
    double f[50] = {0};
    double y[2] = {0.25, 0.75};
    double out[2];
    SpdStatus st = spd_model_predict(m, f, n, y, 2, 1, out);
    spd_model_free(m);
    if (st != SPD_STATUS_OK) return 2;
    if (spd_model_init("bogus", 1, &m) != SPD_STATUS_INVALID_ARGUMENT) return 3;
    if (spd_last_error_message() == NULL) return 4;
    printf("%zu\n", n);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&header_dir)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "50");
}
