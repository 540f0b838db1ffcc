//! C ABI over the `hicontrast` pipeline.
//!
//! Every fallible function returns an [`HcStatus`]. On failure the message is
//! available from [`hc_last_error_message`] on the same thread. Objects are
//! opaque handles created by `*_new`/`*_compute`/`*_run` functions and
//! released with the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use hicontrast::harness::{
    prepare, run_convergence_experiment, run_spectrum_experiment, Config, ConvergenceReport, Setup,
    SpectrumReport,
};
use hicontrast::spectrum::DispersionFunction;
use hicontrast::Error;

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    InvalidGeometry = 4,
    SolverFailed = 5,
    OutOfRange = 6,
    Io = 7,
    Panic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn root(e: &Error) -> &Error {
    match e {
        Error::Stage { source, .. } | Error::StepFailed { source, .. } => root(source),
        other => other,
    }
}

fn status_of(e: &Error) -> HcStatus {
    match root(e) {
        Error::InvalidParameter(_) | Error::ResolutionMismatch(_) | Error::GridMismatch(_) => {
            HcStatus::InvalidArgument
        }
        Error::DisconnectedMatrix { .. }
        | Error::EmptyMatrix
        | Error::DisconnectedMask
        | Error::ThetaNotPositiveDefinite { .. } => HcStatus::InvalidGeometry,
        Error::CgNotConverged { .. }
        | Error::EigenNotConverged { .. }
        | Error::PoleProximity { .. }
        | Error::BracketFailure { .. } => HcStatus::SolverFailed,
        Error::Config(_) => HcStatus::InvalidConfig,
        Error::Io(_) | Error::Json(_) | Error::Csv(_) => HcStatus::Io,
        Error::Stage { .. } | Error::StepFailed { .. } => HcStatus::SolverFailed,
    }
}

fn guard(f: impl FnOnce() -> Result<(), HcStatus>) -> HcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HcStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("panic inside hicontrast");
            HcStatus::Panic
        }
    }
}

fn fail(e: Error) -> HcStatus {
    set_error(e.to_string());
    status_of(&e)
}

fn null(what: &str) -> HcStatus {
    set_error(format!("{what} is null"));
    HcStatus::NullPointer
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, HcStatus> {
    // SAFETY: the caller passes either null or a live handle from this library.
    unsafe { p.as_ref() }.ok_or_else(|| null(what))
}

unsafe fn write<T>(p: *mut T, value: T, what: &str) -> Result<(), HcStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: non-null and, by contract, valid for writes.
    unsafe { p.write(value) };
    Ok(())
}

/// Prepared environment, effective matrix and mode bases.
pub struct HcSetup {
    config: Config,
    setup: Setup,
}

/// Band structure of the limit operator.
pub struct HcBandSet {
    report: SpectrumReport,
}

/// Result of the epsilon sweep.
pub struct HcConvergence {
    report: ConvergenceReport,
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses a TOML configuration and runs the shared setup.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hc_setup_new(toml: *const c_char, out: *mut *mut HcSetup) -> HcStatus {
    guard(|| {
        if toml.is_null() {
            return Err(null("toml"));
        }
        // SAFETY: non-null, NUL-terminated by contract.
        let text = unsafe { CStr::from_ptr(toml) }.to_str().map_err(|_| {
            set_error("config is not valid UTF-8");
            HcStatus::InvalidConfig
        })?;
        let config = Config::from_toml(text).map_err(fail)?;
        let setup = prepare(&config).map_err(fail)?;
        let handle = Box::into_raw(Box::new(HcSetup { config, setup }));
        // SAFETY: `out` checked inside `write`.
        unsafe { write(out, handle, "out") }.inspect_err(|_| {
            // SAFETY: just allocated above and not shared.
            drop(unsafe { Box::from_raw(handle) });
        })
    })
}

/// # Safety
/// `setup` must be null or a handle from [`hc_setup_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hc_setup_free(setup: *mut HcSetup) {
    if !setup.is_null() {
        // SAFETY: handle originates from `Box::into_raw` in `hc_setup_new`.
        drop(unsafe { Box::from_raw(setup) });
    }
}

/// Writes the effective matrix row-major into `out[4]`.
///
/// # Safety
/// `setup` must be a live handle and `out` valid for four doubles.
#[no_mangle]
pub unsafe extern "C" fn hc_setup_theta(setup: *const HcSetup, out: *mut f64) -> HcStatus {
    guard(|| {
        let s = unsafe { borrow(setup, "setup") }?;
        if out.is_null() {
            return Err(null("out"));
        }
        let t = s.setup.theta.theta;
        for (k, v) in [t[0][0], t[0][1], t[1][0], t[1][1]].into_iter().enumerate() {
            // SAFETY: caller provides room for four values.
            unsafe { out.add(k).write(v) };
        }
        Ok(())
    })
}

/// Matrix volume fraction and number of inclusion types.
///
/// # Safety
/// `setup` must be a live handle; `alpha0` and `types` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hc_setup_fractions(
    setup: *const HcSetup,
    alpha0: *mut f64,
    types: *mut usize,
) -> HcStatus {
    guard(|| {
        let s = unsafe { borrow(setup, "setup") }?;
        unsafe { write(alpha0, s.setup.fractions.alpha0, "alpha0") }?;
        unsafe { write(types, s.setup.catalog.domains.len(), "types") }
    })
}

/// Writes the configuration hash as a NUL-terminated string into `buf`.
///
/// # Safety
/// `setup` must be a live handle and `buf` valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn hc_setup_config_hash(
    setup: *const HcSetup,
    buf: *mut c_char,
    len: usize,
) -> HcStatus {
    guard(|| {
        let s = unsafe { borrow(setup, "setup") }?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let hash = s.config.hash();
        if len < hash.len() + 1 {
            set_error(format!("buffer of {len} bytes, need {}", hash.len() + 1));
            return Err(HcStatus::OutOfRange);
        }
        // SAFETY: `buf` holds at least `hash.len() + 1` bytes.
        unsafe {
            ptr::copy_nonoverlapping(hash.as_ptr().cast(), buf, hash.len());
            buf.add(hash.len()).write(0);
        }
        Ok(())
    })
}

/// Evaluates the dispersion function `W(lambda)` of the setup.
///
/// # Safety
/// `setup` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hc_dispersion_eval(
    setup: *const HcSetup,
    lambda: f64,
    out: *mut f64,
) -> HcStatus {
    guard(|| {
        let s = unsafe { borrow(setup, "setup") }?;
        let w = DispersionFunction::new(&s.setup.fractions, &s.setup.bases);
        let value = w.eval(lambda).map_err(fail)?;
        unsafe { write(out, value, "out") }
    })
}

/// Computes the band structure (and the fine diagnostic if configured).
///
/// # Safety
/// `setup` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hc_spectrum_compute(
    setup: *const HcSetup,
    out: *mut *mut HcBandSet,
) -> HcStatus {
    guard(|| {
        let s = unsafe { borrow(setup, "setup") }?;
        if out.is_null() {
            return Err(null("out"));
        }
        let report = run_spectrum_experiment(&s.config, &s.setup).map_err(fail)?;
        let handle = Box::into_raw(Box::new(HcBandSet { report }));
        unsafe { write(out, handle, "out") }
    })
}

/// # Safety
/// `bands` must be null or a handle from [`hc_spectrum_compute`].
#[no_mangle]
pub unsafe extern "C" fn hc_bandset_free(bands: *mut HcBandSet) {
    if !bands.is_null() {
        // SAFETY: handle originates from `Box::into_raw`.
        drop(unsafe { Box::from_raw(bands) });
    }
}

/// Number of continuous bands.
///
/// # Safety
/// `bands` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hc_bandset_band_count(
    bands: *const HcBandSet,
    out: *mut usize,
) -> HcStatus {
    guard(|| {
        let b = unsafe { borrow(bands, "bands") }?;
        unsafe { write(out, b.report.bands.bands.len(), "out") }
    })
}

/// Endpoints of band `index`.
///
/// # Safety
/// `bands` must be a live handle; `start` and `end` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hc_bandset_band(
    bands: *const HcBandSet,
    index: usize,
    start: *mut f64,
    end: *mut f64,
) -> HcStatus {
    guard(|| {
        let b = unsafe { borrow(bands, "bands") }?;
        let Some(band) = b.report.bands.bands.get(index) else {
            set_error(format!("band {index} of {}", b.report.bands.bands.len()));
            return Err(HcStatus::OutOfRange);
        };
        unsafe { write(start, band.start, "start") }?;
        unsafe { write(end, band.end, "end") }
    })
}

/// Number of point eigenvalues of infinite multiplicity.
///
/// # Safety
/// `bands` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hc_bandset_point_count(
    bands: *const HcBandSet,
    out: *mut usize,
) -> HcStatus {
    guard(|| {
        let b = unsafe { borrow(bands, "bands") }?;
        unsafe { write(out, b.report.bands.point_spectrum.len(), "out") }
    })
}

/// Point eigenvalue `index`.
///
/// # Safety
/// `bands` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hc_bandset_point(
    bands: *const HcBandSet,
    index: usize,
    out: *mut f64,
) -> HcStatus {
    guard(|| {
        let b = unsafe { borrow(bands, "bands") }?;
        let Some(p) = b.report.bands.point_spectrum.get(index) else {
            set_error(format!(
                "point {index} of {}",
                b.report.bands.point_spectrum.len()
            ));
            return Err(HcStatus::OutOfRange);
        };
        unsafe { write(out, p.value, "out") }
    })
}

/// Largest retained pole; infinite when the catalog is empty.
///
/// # Safety
/// `bands` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hc_bandset_truncation_cap(
    bands: *const HcBandSet,
    out: *mut f64,
) -> HcStatus {
    guard(|| {
        let b = unsafe { borrow(bands, "bands") }?;
        unsafe { write(out, b.report.bands.truncation_cap, "out") }
    })
}

/// Runs the epsilon sweep of the configuration.
///
/// # Safety
/// `setup` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hc_convergence_run(
    setup: *const HcSetup,
    out: *mut *mut HcConvergence,
) -> HcStatus {
    guard(|| {
        let s = unsafe { borrow(setup, "setup") }?;
        if out.is_null() {
            return Err(null("out"));
        }
        let report = run_convergence_experiment(&s.config, &s.setup).map_err(fail)?;
        let handle = Box::into_raw(Box::new(HcConvergence { report }));
        unsafe { write(out, handle, "out") }
    })
}

/// # Safety
/// `run` must be null or a handle from [`hc_convergence_run`].
#[no_mangle]
pub unsafe extern "C" fn hc_convergence_free(run: *mut HcConvergence) {
    if !run.is_null() {
        // SAFETY: handle originates from `Box::into_raw`.
        drop(unsafe { Box::from_raw(run) });
    }
}

/// Number of table rows (two per epsilon: `t = 0` and the final time).
///
/// # Safety
/// `run` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hc_convergence_row_count(
    run: *const HcConvergence,
    out: *mut usize,
) -> HcStatus {
    guard(|| {
        let r = unsafe { borrow(run, "run") }?;
        unsafe { write(out, r.report.rows.len(), "out") }
    })
}

/// Row `index` as `(epsilon, t, error)`.
///
/// # Safety
/// `run` must be a live handle; the output pointers valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hc_convergence_row(
    run: *const HcConvergence,
    index: usize,
    epsilon: *mut f64,
    t: *mut f64,
    error: *mut f64,
) -> HcStatus {
    guard(|| {
        let r = unsafe { borrow(run, "run") }?;
        let Some(row) = r.report.rows.get(index) else {
            set_error(format!("row {index} of {}", r.report.rows.len()));
            return Err(HcStatus::OutOfRange);
        };
        unsafe { write(epsilon, row.epsilon, "epsilon") }?;
        unsafe { write(t, row.t, "t") }?;
        unsafe { write(error, row.error, "error") }
    })
}

/// Whether the sweep met its gates (errors strictly decreasing).
///
/// # Safety
/// `run` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hc_convergence_passed(
    run: *const HcConvergence,
    out: *mut bool,
) -> HcStatus {
    guard(|| {
        let r = unsafe { borrow(run, "run") }?;
        unsafe { write(out, r.report.passed(), "out") }
    })
}
