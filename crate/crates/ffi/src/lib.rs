//! C ABI over `stablepde`.
//!
//! Objects are opaque handles created by `*_new`/`*_load` functions and
//! released with the matching `*_free`. Every fallible call returns an
//! [`SpdStatus`]; on failure `spd_last_error_message` describes the error
//! raised most recently on the calling thread. Arrays are row-major and
//! owned by the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ndarray::Array2;
use stablepde::adversarial::{attack_evaluation, AttackConfig, EpsilonScale};
use stablepde::cli::RunConfig;
use stablepde::eval_report::jacobian_spectral_norm;
use stablepde::operator_net::{ArchSpec, Checkpoint, DeepOnetParams};
use stablepde::pde_suite::{Problem, ProblemKind, ProblemSpec};
use stablepde::reference_solvers::reference_solution;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Shape = 4,
    Runtime = 5,
    Panic = 6,
}

/// Trained or freshly initialized DeepONet.
pub struct SpdModel {
    params: DeepOnetParams,
    seed: u64,
    step: u64,
}

/// Problem definition with its input sampler.
pub struct SpdProblem {
    problem: Problem,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

struct Failure(SpdStatus, String);

impl Failure {
    fn new(status: SpdStatus, e: impl ToString) -> Self {
        Failure(status, e.to_string())
    }
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> SpdStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => SpdStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SpdStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    // SAFETY: callers pass either null or a pointer obtained from this library.
    unsafe { p.as_ref() }.ok_or_else(|| Failure::new(SpdStatus::NullPointer, format!("{what} is null")))
}

fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(SpdStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: non-null and documented as a NUL-terminated string.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Failure::new(SpdStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::new(SpdStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: caller guarantees `len` readable doubles.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::new(SpdStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: caller guarantees `len` writable doubles.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::new(SpdStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: non-null output slot provided by the caller.
    unsafe { out.write(value) };
    Ok(())
}

fn kind(text: &str) -> Result<ProblemKind, Failure> {
    text.parse().map_err(|e| Failure::new(SpdStatus::InvalidArgument, e))
}

fn coords(model: &DeepOnetParams, p: *const f64, n_points: usize, dim: usize) -> Result<Array2<f64>, Failure> {
    if dim != model.arch.coord_dim() {
        return Err(Failure::new(
            SpdStatus::Shape,
            format!("coordinates have dimension {dim}, model expects {}", model.arch.coord_dim()),
        ));
    }
    let data = slice(p, n_points * dim, "coords")?;
    Array2::from_shape_vec((n_points, dim), data.to_vec()).map_err(|e| Failure::new(SpdStatus::Shape, e))
}

fn check_len(got: usize, expected: usize, what: &str) -> Result<(), Failure> {
    if got != expected {
        return Err(Failure::new(SpdStatus::Shape, format!("{what} has length {got}, expected {expected}")));
    }
    Ok(())
}

/// Message for the last failure on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn spd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn spd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// New model with the standard architecture for `problem_kind`.
///
/// # Safety
/// `problem_kind` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spd_model_init(problem_kind: *const c_char, seed: u64, out: *mut *mut SpdModel) -> SpdStatus {
    guard(|| {
        let k = kind(c_str(problem_kind, "problem_kind")?)?;
        let spec = ProblemSpec::new(k);
        let arch = ArchSpec::standard(spec.sensor_count, k.coord_dim(), k.default_transform());
        let params = DeepOnetParams::init(&arch, seed).map_err(|e| Failure::new(SpdStatus::InvalidArgument, e))?;
        write_out(out, Box::into_raw(Box::new(SpdModel { params, seed, step: 0 })), "out")
    })
}

/// Loads a JSON checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spd_model_load(path: *const c_char, out: *mut *mut SpdModel) -> SpdStatus {
    guard(|| {
        let path = c_str(path, "path")?;
        let ck = Checkpoint::load(Path::new(path)).map_err(|e| Failure::new(SpdStatus::Io, e))?;
        let model = SpdModel { params: ck.params, seed: ck.seed, step: ck.step };
        write_out(out, Box::into_raw(Box::new(model)), "out")
    })
}

/// Writes the model as a JSON checkpoint.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn spd_model_save(model: *const SpdModel, path: *const c_char) -> SpdStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let path = c_str(path, "path")?;
        let ck = Checkpoint { params: m.params.clone(), seed: m.seed, step: m.step };
        ck.save(Path::new(path)).map_err(|e| Failure::new(SpdStatus::Io, e))
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn spd_model_free(model: *mut SpdModel) {
    if !model.is_null() {
        // SAFETY: pointer produced by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Number of sensor values the model reads.
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spd_model_sensor_count(model: *const SpdModel, out: *mut usize) -> SpdStatus {
    guard(|| write_out(out, non_null(model, "model")?.params.arch.sensor_count(), "out"))
}

/// Coordinate dimension of the trunk input.
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spd_model_coord_dim(model: *const SpdModel, out: *mut usize) -> SpdStatus {
    guard(|| write_out(out, non_null(model, "model")?.params.arch.coord_dim(), "out"))
}

/// `out[i] = G(f)(coords[i])` for `n_points` coordinates of dimension `dim`.
///
/// # Safety
/// `f` holds `m` doubles, `coords` holds `n_points·dim`, `out` has room for
/// `n_points`.
#[no_mangle]
pub unsafe extern "C" fn spd_model_predict(
    model: *const SpdModel,
    f: *const f64,
    m: usize,
    coords_ptr: *const f64,
    n_points: usize,
    dim: usize,
    out: *mut f64,
) -> SpdStatus {
    guard(|| {
        let model = &non_null(model, "model")?.params;
        let f = slice(f, m, "f")?;
        check_len(m, model.arch.sensor_count(), "f")?;
        let y = coords(model, coords_ptr, n_points, dim)?;
        let pred = model.forward(f, &y).map_err(|e| Failure::new(SpdStatus::Runtime, e))?;
        slice_mut(out, n_points, "out")?.copy_from_slice(&pred);
        Ok(())
    })
}

/// Largest singular value of `∂G(f)(coords)/∂f` by power iteration.
///
/// # Safety
/// As [`spd_model_predict`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spd_model_spectral_norm(
    model: *const SpdModel,
    f: *const f64,
    m: usize,
    coords_ptr: *const f64,
    n_points: usize,
    dim: usize,
    tol: f64,
    max_iter: usize,
    out: *mut f64,
) -> SpdStatus {
    guard(|| {
        let model = &non_null(model, "model")?.params;
        let f = slice(f, m, "f")?;
        check_len(m, model.arch.sensor_count(), "f")?;
        let y = coords(model, coords_ptr, n_points, dim)?;
        let est = jacobian_spectral_norm(model, f, &y, tol, max_iter).map_err(|e| Failure::new(SpdStatus::Runtime, e))?;
        write_out(out, est.spectral_norm, "out")
    })
}

/// PGD attack on `‖G(f̃)(coords) − u_true‖²` within `‖f̃ − f‖∞ ≤ ε·max|f|`,
/// with `α = ε/4` and no random start. Writes `f̃` into `out` (`m` doubles).
///
/// # Safety
/// `f` and `out` hold `m` doubles, `u_true` holds `n_points`, `coords`
/// holds `n_points·dim`.
#[no_mangle]
pub unsafe extern "C" fn spd_attack_evaluation(
    model: *const SpdModel,
    f: *const f64,
    m: usize,
    u_true: *const f64,
    coords_ptr: *const f64,
    n_points: usize,
    dim: usize,
    epsilon: f64,
    n_iter: usize,
    out: *mut f64,
) -> SpdStatus {
    guard(|| {
        let model = &non_null(model, "model")?.params;
        let f = slice(f, m, "f")?;
        check_len(m, model.arch.sensor_count(), "f")?;
        let u = slice(u_true, n_points, "u_true")?;
        let y = coords(model, coords_ptr, n_points, dim)?;
        let cfg = AttackConfig {
            epsilon,
            step_alpha: epsilon / 4.0,
            n_iter,
            scale: EpsilonScale::MaxAbs,
            ..AttackConfig::evaluation()
        };
        let (ft, _) = attack_evaluation(model, f, u, &y, &cfg).map_err(|e| Failure::new(SpdStatus::InvalidArgument, e))?;
        slice_mut(out, m, "out")?.copy_from_slice(&ft);
        Ok(())
    })
}

/// Problem with default settings for `problem_kind`.
///
/// # Safety
/// `problem_kind` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spd_problem_new(problem_kind: *const c_char, out: *mut *mut SpdProblem) -> SpdStatus {
    guard(|| {
        let k = kind(c_str(problem_kind, "problem_kind")?)?;
        let problem = Problem::from_kind(k).map_err(|e| Failure::new(SpdStatus::InvalidArgument, e))?;
        write_out(out, Box::into_raw(Box::new(SpdProblem { problem })), "out")
    })
}

/// Releases a problem; null is ignored.
///
/// # Safety
/// `problem` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn spd_problem_free(problem: *mut SpdProblem) {
    if !problem.is_null() {
        // SAFETY: pointer produced by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(problem) });
    }
}

/// Number of sensor values of the problem's inputs.
///
/// # Safety
/// `problem` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spd_problem_sensor_count(problem: *const SpdProblem, out: *mut usize) -> SpdStatus {
    guard(|| write_out(out, non_null(problem, "problem")?.problem.sensor_count(), "out"))
}

/// Draws one input function into `out` (`len` must equal the sensor count).
///
/// # Safety
/// `out` has room for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn spd_problem_sample_input(problem: *const SpdProblem, seed: u64, out: *mut f64, len: usize) -> SpdStatus {
    guard(|| {
        let p = &non_null(problem, "problem")?.problem;
        check_len(len, p.sensor_count(), "out")?;
        let draw = p.sample_input(seed).map_err(|e| Failure::new(SpdStatus::Runtime, e))?;
        slice_mut(out, len, "out")?.copy_from_slice(&draw.values);
        Ok(())
    })
}

/// Reference solution for input `f` at `n_points` coordinates.
///
/// # Safety
/// `f` holds `m` doubles, `coords` holds `n_points·dim`, `out` has room for
/// `n_points`.
#[no_mangle]
pub unsafe extern "C" fn spd_problem_reference_solution(
    problem: *const SpdProblem,
    f: *const f64,
    m: usize,
    coords_ptr: *const f64,
    n_points: usize,
    dim: usize,
    out: *mut f64,
) -> SpdStatus {
    guard(|| {
        let p = &non_null(problem, "problem")?.problem;
        let f = slice(f, m, "f")?;
        check_len(m, p.sensor_count(), "f")?;
        check_len(dim, p.coord_dim(), "coordinate dimension")?;
        let data = slice(coords_ptr, n_points * dim, "coords")?;
        let y = Array2::from_shape_vec((n_points, dim), data.to_vec()).map_err(|e| Failure::new(SpdStatus::Shape, e))?;
        let u = reference_solution(p, f, &y).map_err(|e| Failure::new(SpdStatus::Runtime, e))?;
        slice_mut(out, n_points, "out")?.copy_from_slice(&u);
        Ok(())
    })
}

/// Parses and validates a run configuration given as TOML text.
///
/// # Safety
/// `toml_text` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn spd_config_validate(toml_text: *const c_char) -> SpdStatus {
    guard(|| {
        let text = c_str(toml_text, "toml_text")?;
        RunConfig::from_toml_str(text).map(|_| ()).map_err(|e| Failure::new(SpdStatus::InvalidArgument, e))
    })
}
