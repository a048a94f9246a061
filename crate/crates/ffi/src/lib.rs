//! C interface to the gcdyn library.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_solve`/
//! `*_run` functions and released by the matching `*_free`. Every fallible
//! function returns a [`GcdynStatus`]; on failure the message is available
//! from [`gcdyn_last_error`] on the same thread until the next failing call.

use gcdyn::dmf::DmfSolution;
use gcdyn::harness::output::to_csv;
use gcdyn::harness::run::{run_experiment, solve_point_dmf};
use gcdyn::harness::ExperimentConfig;
use gcdyn::perceptron::{momentum_coeffs, MetricKind, Perceptron};
use gcdyn::rng::SeedKey;
use gcdyn::Error;
use libc::{c_char, size_t};
use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

/// Result codes of the C interface.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GcdynStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Numerical = 4,
    NotConverged = 5,
    Io = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Parsed and validated experiment configuration.
pub struct GcdynConfig {
    inner: ExperimentConfig,
}

/// DMF solution of the first point of a configuration.
pub struct GcdynDmf {
    solution: DmfSolution,
    maps: Perceptron,
}

/// Aggregated rows of an experiment run.
pub struct GcdynResult {
    csv: CString,
    rows: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("NUL bytes removed"));
}

fn status_of(e: &Error) -> GcdynStatus {
    match e {
        Error::Config(_) | Error::Parse(_) => GcdynStatus::Config,
        Error::InvalidRange { .. } | Error::Shape(_) | Error::InsufficientReplications { .. } => {
            GcdynStatus::InvalidArgument
        }
        Error::DmfNotConverged { .. } | Error::RefinementNotConverged { .. } => GcdynStatus::NotConverged,
        Error::Io(_) => GcdynStatus::Io,
        Error::Annotated { source, .. } => status_of(source),
        _ => GcdynStatus::Numerical,
    }
}

fn fail(status: GcdynStatus, msg: impl Into<String>) -> GcdynStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> Result<(), GcdynStatus>) -> GcdynStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GcdynStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(GcdynStatus::Panic, msg)
        }
    }
}

fn lib_err(e: Error) -> GcdynStatus {
    fail(status_of(&e), e.to_string())
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, GcdynStatus> {
    if p.is_null() {
        return Err(fail(GcdynStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(GcdynStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, GcdynStatus> {
    p.as_ref()
        .ok_or_else(|| fail(GcdynStatus::NullPointer, format!("{name} is null")))
}

fn out_ptr<T>(p: *mut T, name: &str) -> Result<(), GcdynStatus> {
    if p.is_null() {
        Err(fail(GcdynStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// Message of the last failure on this thread; empty if none. The pointer
/// stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn gcdyn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Parse a TOML configuration. Missing keys take their defaults.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gcdyn_config_new(toml: *const c_char, out: *mut *mut GcdynConfig) -> GcdynStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let text = str_arg(toml, "toml")?;
        let inner = ExperimentConfig::from_toml(text).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(GcdynConfig { inner }));
        Ok(())
    })
}

/// Apply one `section.key=value` override and re-validate. On failure the
/// configuration is unchanged.
///
/// # Safety
/// `cfg` must come from [`gcdyn_config_new`]; `assignment` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gcdyn_config_set(cfg: *mut GcdynConfig, assignment: *const c_char) -> GcdynStatus {
    guard(|| {
        let c = cfg
            .as_mut()
            .ok_or_else(|| fail(GcdynStatus::NullPointer, "cfg is null"))?;
        let a = str_arg(assignment, "assignment")?;
        c.inner = ExperimentConfig::from_toml_with(&c.inner.canonical(), &[a.to_string()]).map_err(lib_err)?;
        Ok(())
    })
}

/// Write the 64-character config hash and a NUL into `buf` (at least 65 bytes).
///
/// # Safety
/// `cfg` must be a live handle and `buf` writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn gcdyn_config_hash(cfg: *const GcdynConfig, buf: *mut c_char, len: size_t) -> GcdynStatus {
    guard(|| {
        let c = handle(cfg, "cfg")?;
        out_ptr(buf, "buf")?;
        copy_out(&c.inner.hash(), buf, len)
    })
}

unsafe fn copy_out(s: &str, buf: *mut c_char, len: size_t) -> Result<(), GcdynStatus> {
    if len < s.len() + 1 {
        return Err(fail(
            GcdynStatus::BufferTooSmall,
            format!("need {} bytes, got {len}", s.len() + 1),
        ));
    }
    std::ptr::copy_nonoverlapping(s.as_ptr() as *const c_char, buf, s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

/// # Safety
/// `cfg` must come from [`gcdyn_config_new`] or be null.
#[no_mangle]
pub unsafe extern "C" fn gcdyn_config_free(cfg: *mut GcdynConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Solve the DMF equations at the first point of `cfg`.
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gcdyn_dmf_solve(cfg: *const GcdynConfig, out: *mut *mut GcdynDmf) -> GcdynStatus {
    guard(|| {
        let c = handle(cfg, "cfg")?;
        out_ptr(out, "out")?;
        let point = c.inner.points().remove(0);
        let solution = solve_point_dmf(&point, &c.inner.hash()).map_err(lib_err)?;
        let maps = point
            .perceptron(nalgebra::DVector::zeros(point.n()))
            .map_err(lib_err)?;
        *out = Box::into_raw(Box::new(GcdynDmf { solution, maps }));
        Ok(())
    })
}

/// Number of iterates L of the solution, or 0 for a null handle.
///
/// # Safety
/// `dmf` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn gcdyn_dmf_steps(dmf: *const GcdynDmf) -> size_t {
    dmf.as_ref().map_or(0, |d| d.solution.steps())
}

/// Final relative residual of the fixed-point iteration (NaN for null).
///
/// # Safety
/// `dmf` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn gcdyn_dmf_residual(dmf: *const GcdynDmf) -> f64 {
    dmf.as_ref().map_or(f64::NAN, |d| d.solution.residual)
}

/// Mean metric curve ("loss" or "zero_one") of the solution and its Monte
/// Carlo standard error, from `paths` characteristic paths. `mean` and
/// `stderr` must hold `len` = L values; `stderr` may be null.
///
/// # Safety
/// `dmf` must be a live handle, `metric` NUL-terminated, and the arrays
/// writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gcdyn_dmf_metric_curve(
    dmf: *const GcdynDmf,
    metric: *const c_char,
    paths: size_t,
    seed: u64,
    mean: *mut f64,
    stderr: *mut f64,
    len: size_t,
) -> GcdynStatus {
    guard(|| {
        let d = handle(dmf, "dmf")?;
        let kind = MetricKind::from_tag(str_arg(metric, "metric")?).map_err(lib_err)?;
        out_ptr(mean, "mean")?;
        let steps = d.solution.steps();
        if len != steps {
            return Err(fail(GcdynStatus::InvalidArgument, format!("len is {len}, L is {steps}")));
        }
        if paths < 2 {
            return Err(fail(GcdynStatus::InvalidArgument, "paths must be at least 2"));
        }
        let (m, se) = d.solution.metric_curve(&d.maps, kind, paths, &SeedKey::new(seed));
        std::slice::from_raw_parts_mut(mean, len).copy_from_slice(&m);
        if !stderr.is_null() {
            std::slice::from_raw_parts_mut(stderr, len).copy_from_slice(&se);
        }
        Ok(())
    })
}

/// # Safety
/// `dmf` must come from [`gcdyn_dmf_solve`] or be null.
#[no_mangle]
pub unsafe extern "C" fn gcdyn_dmf_free(dmf: *mut GcdynDmf) {
    if !dmf.is_null() {
        drop(Box::from_raw(dmf));
    }
}

/// Run every configured method over the sweep with `threads` workers (0 for
/// all cores). The output does not depend on `threads`.
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gcdyn_experiment_run(
    cfg: *const GcdynConfig,
    threads: size_t,
    out: *mut *mut GcdynResult,
) -> GcdynStatus {
    guard(|| {
        let c = handle(cfg, "cfg")?;
        out_ptr(out, "out")?;
        let res = run_experiment(&c.inner, threads).map_err(lib_err)?;
        let csv = CString::new(to_csv(&res.rows)).expect("CSV has no NUL bytes");
        *out = Box::into_raw(Box::new(GcdynResult {
            csv,
            rows: res.rows.len(),
        }));
        Ok(())
    })
}

/// Number of data rows in the result (0 for null).
///
/// # Safety
/// `res` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn gcdyn_result_rows(res: *const GcdynResult) -> size_t {
    res.as_ref().map_or(0, |r| r.rows)
}

/// The result as CSV text, owned by the handle.
///
/// # Safety
/// `res` must be a live handle or null; the pointer dies with the handle.
#[no_mangle]
pub unsafe extern "C" fn gcdyn_result_csv(res: *const GcdynResult) -> *const c_char {
    res.as_ref().map_or(std::ptr::null(), |r| r.csv.as_ptr())
}

/// # Safety
/// `res` must come from [`gcdyn_experiment_run`] or be null.
#[no_mangle]
pub unsafe extern "C" fn gcdyn_result_free(res: *mut GcdynResult) {
    if !res.is_null() {
        drop(Box::from_raw(res));
    }
}

/// Momentum coefficients: λ into `lambda` (`steps` values) and Λ into
/// `big_lambda` (`steps`² values, column-major, Λ(μ, l) at μ + l·steps).
///
/// # Safety
/// The arrays must be writable for the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn gcdyn_momentum_coefficients(
    t: f64,
    s: f64,
    steps: size_t,
    lambda: *mut f64,
    big_lambda: *mut f64,
) -> GcdynStatus {
    guard(|| {
        out_ptr(lambda, "lambda")?;
        out_ptr(big_lambda, "big_lambda")?;
        let c = momentum_coeffs(t, s, steps).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(lambda, steps).copy_from_slice(c.lambda.as_slice());
        std::slice::from_raw_parts_mut(big_lambda, steps * steps).copy_from_slice(c.big_lambda.as_slice());
        Ok(())
    })
}
