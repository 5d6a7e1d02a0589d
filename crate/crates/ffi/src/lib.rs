//! C ABI over the `qfconv` library.
//!
//! Every fallible function returns a [`QfcStatus`] and writes results
//! through out-pointers. On failure the message is kept per thread and can
//! be read with [`qfc_last_error`]. Handles are opaque, created by a
//! `*_new`/`*_from_*` function and released by the matching `*_free`.
//!
//! Rates and durations use ns and rad/ns, as in the Rust API. Schedule
//! documents are the same TOML text the command-line tool reads and writes.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use qfconv::channel::{capacity, coherent_information_closed, comm_rate, IoWindow, DEFAULT_RESOLUTION};
use qfconv::dynamics::{evolve, success_probability, DensityMatrix, EvolveOptions, SystemModel};
use qfconv::model::{CycleName, CycleSpec, KappaPolicy};
use qfconv::optimizer::{constant_drive_baseline, optimize_protocol, OptimizeConfig};
use qfconv::pulses::{ProtocolSchedule, Shape};
use qfconv::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QfcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Config = 3,
    Numerical = 4,
    MissingCache = 5,
    Io = 6,
    /// Output buffer too small; the required size was written.
    BufferTooSmall = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QfcCycleName {
    A = 0,
    B = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QfcKappa {
    /// Twice the optical vacuum coupling.
    TwoGO = 0,
    Zero = 1,
    /// Use the explicit rate argument, ns^-1.
    Explicit = 2,
}

/// Opaque cycle constants.
pub struct QfcCycle(CycleSpec);

/// Opaque pulse schedule.
pub struct QfcSchedule(ProtocolSchedule);

/// Summary of an optimization run.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct QfcOptimizeReport {
    pub success: f64,
    pub loss: f64,
    pub evaluations: u64,
    pub converged: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> QfcStatus {
    match e {
        Error::InvalidInput(_) => QfcStatus::InvalidInput,
        Error::Config(_) => QfcStatus::Config,
        Error::Numerical(_) => QfcStatus::Numerical,
        Error::MissingCache(_) => QfcStatus::MissingCache,
        Error::Io(_) | Error::Csv(_) => QfcStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Status(QfcStatus, String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Status(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> QfcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => QfcStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            QfcStatus::NullPointer
        }
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".to_string());
            QfcStatus::Panic
        }
    }
}

unsafe fn out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn borrow<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn text<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Status(QfcStatus::InvalidInput, format!("{what} is not valid UTF-8")))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn qfc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn qfc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `out_cycle` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qfc_cycle_new(
    name: QfcCycleName,
    kappa: QfcKappa,
    explicit_kappa: f64,
    out_cycle: *mut *mut QfcCycle,
) -> QfcStatus {
    guard(|| {
        let slot = out(out_cycle, "out_cycle")?;
        let policy = match kappa {
            QfcKappa::TwoGO => KappaPolicy::TwoGO,
            QfcKappa::Zero => KappaPolicy::Zero,
            QfcKappa::Explicit => {
                if !(explicit_kappa >= 0.0) || !explicit_kappa.is_finite() {
                    return Err(Failure::Status(QfcStatus::InvalidInput, "explicit kappa must be finite and nonnegative".into()));
                }
                KappaPolicy::Explicit(explicit_kappa)
            }
        };
        let name = match name {
            QfcCycleName::A => CycleName::A,
            QfcCycleName::B => CycleName::B,
        };
        *slot = Box::into_raw(Box::new(QfcCycle(CycleSpec::build(name, policy))));
        Ok(())
    })
}

/// Optical cavity decay rate of the cycle, ns^-1.
///
/// # Safety
/// `cycle` must come from [`qfc_cycle_new`]; `out_kappa` must be valid.
#[no_mangle]
pub unsafe extern "C" fn qfc_cycle_kappa(cycle: *const QfcCycle, out_kappa: *mut f64) -> QfcStatus {
    guard(|| {
        *out(out_kappa, "out_kappa")? = borrow(cycle, "cycle")?.0.kappa;
        Ok(())
    })
}

/// # Safety
/// `cycle` must come from [`qfc_cycle_new`] or be NULL; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn qfc_cycle_free(cycle: *mut QfcCycle) {
    if !cycle.is_null() {
        drop(Box::from_raw(cycle));
    }
}

/// Parses and validates a schedule document against `cycle`.
///
/// # Safety
/// Pointers must be valid; `toml` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn qfc_schedule_from_toml(
    cycle: *const QfcCycle,
    toml: *const c_char,
    out_schedule: *mut *mut QfcSchedule,
) -> QfcStatus {
    guard(|| {
        let cycle = borrow(cycle, "cycle")?;
        let doc = text(toml, "toml")?;
        let slot = out(out_schedule, "out_schedule")?;
        let s = ProtocolSchedule::from_toml(doc)?;
        s.validate(&cycle.0)?;
        *slot = Box::into_raw(Box::new(QfcSchedule(s)));
        Ok(())
    })
}

/// Writes the schedule document into `buf` (NUL-terminated).
///
/// `out_needed` receives the size including the terminator; if `len` is
/// smaller, nothing is written and `BufferTooSmall` is returned.
///
/// # Safety
/// `buf` must hold `len` bytes or be NULL with `len == 0`.
#[no_mangle]
pub unsafe extern "C" fn qfc_schedule_to_toml(
    schedule: *const QfcSchedule,
    buf: *mut c_char,
    len: usize,
    out_needed: *mut usize,
) -> QfcStatus {
    guard(|| {
        let s = borrow(schedule, "schedule")?;
        let needed = out(out_needed, "out_needed")?;
        let doc = s.0.to_toml()?;
        *needed = doc.len() + 1;
        if len < doc.len() + 1 {
            return Err(Failure::Status(QfcStatus::BufferTooSmall, format!("schedule needs {} bytes", doc.len() + 1)));
        }
        if buf.is_null() {
            return Err(Failure::Null("buf"));
        }
        ptr::copy_nonoverlapping(doc.as_ptr(), buf.cast(), doc.len());
        *buf.add(doc.len()) = 0;
        Ok(())
    })
}

/// Total duration of the schedule, ns.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn qfc_schedule_duration(schedule: *const QfcSchedule, out_ns: *mut f64) -> QfcStatus {
    guard(|| {
        *out(out_ns, "out_ns")? = borrow(schedule, "schedule")?.0.duration;
        Ok(())
    })
}

/// # Safety
/// `schedule` must come from this library or be NULL; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn qfc_schedule_free(schedule: *mut QfcSchedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}

/// Success probability of one master-equation run from the absorbing state.
///
/// `tol` bounds the change of every final population when the step is halved.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn qfc_simulate(
    cycle: *const QfcCycle,
    schedule: *const QfcSchedule,
    tol: f64,
    out_success: *mut f64,
) -> QfcStatus {
    guard(|| {
        let cycle = borrow(cycle, "cycle")?;
        let s = borrow(schedule, "schedule")?;
        let slot = out(out_success, "out_success")?;
        if !(tol > 0.0) {
            return Err(Failure::Status(QfcStatus::InvalidInput, "tol must be positive".into()));
        }
        s.0.validate(&cycle.0)?;
        let model = SystemModel::new(&cycle.0)?;
        let opts = EvolveOptions { tol, stride: usize::MAX, ..Default::default() };
        let traj = evolve(&model, &DensityMatrix::pure(model.dim(), model.basis.initial()), &s.0, opts)?;
        *slot = success_probability(&model.basis, traj.last());
        Ok(())
    })
}

/// Optimizes a protocol of duration `tau_ns`.
///
/// `parametrization` is `"gaussian"`, `"piecewise:N"` or `"constant"` (the
/// constant-drive baseline). `config_toml` may be NULL for the default
/// optimizer settings; `seed` always overrides the seed it holds.
///
/// # Safety
/// Pointers other than `config_toml` must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn qfc_optimize(
    cycle: *const QfcCycle,
    tau_ns: f64,
    parametrization: *const c_char,
    config_toml: *const c_char,
    seed: u64,
    out_schedule: *mut *mut QfcSchedule,
    out_report: *mut QfcOptimizeReport,
) -> QfcStatus {
    guard(|| {
        let cycle = borrow(cycle, "cycle")?;
        let kind = text(parametrization, "parametrization")?;
        let slot = out(out_schedule, "out_schedule")?;
        let report = out(out_report, "out_report")?;
        let mut config: OptimizeConfig = if config_toml.is_null() {
            OptimizeConfig::default()
        } else {
            toml::from_str(text(config_toml, "config_toml")?).map_err(Error::from)?
        };
        config.simplex.seed = seed;
        let r = if kind.trim() == "constant" {
            constant_drive_baseline(&cycle.0, tau_ns, &config)?
        } else {
            let shape: Shape = kind.parse()?;
            optimize_protocol(&cycle.0, tau_ns, shape, &config)?
        };
        *report = QfcOptimizeReport {
            success: r.success,
            loss: r.loss,
            evaluations: r.evaluations as u64,
            converged: r.converged,
        };
        *slot = Box::into_raw(Box::new(QfcSchedule(r.schedule)));
        Ok(())
    })
}

/// Capacity (qubits per use) of the loss channel with loss probability `p`.
///
/// # Safety
/// `out_capacity` must be valid.
#[no_mangle]
pub unsafe extern "C" fn qfc_capacity(p: f64, out_capacity: *mut f64) -> QfcStatus {
    guard(|| {
        *out(out_capacity, "out_capacity")? = capacity(p, DEFAULT_RESOLUTION)?;
        Ok(())
    })
}

/// Coherent information for the input with excited population `q` and coherence `c_re + i c_im`.
///
/// # Safety
/// `out_bits` must be valid.
#[no_mangle]
pub unsafe extern "C" fn qfc_coherent_information(q: f64, c_re: f64, c_im: f64, p: f64, out_bits: *mut f64) -> QfcStatus {
    guard(|| {
        *out(out_bits, "out_bits")? = coherent_information_closed(q, qfconv::dynamics::C64::new(c_re, c_im), p)?;
        Ok(())
    })
}

/// Communication rate in Mqb/s for protocol duration `tau_ns`, loss `p` and readout window `io_window_ns`.
///
/// # Safety
/// `out_rate` must be valid.
#[no_mangle]
pub unsafe extern "C" fn qfc_comm_rate(tau_ns: f64, p: f64, io_window_ns: f64, out_rate: *mut f64) -> QfcStatus {
    guard(|| {
        *out(out_rate, "out_rate")? = comm_rate(tau_ns, p, IoWindow::Explicit { ns: io_window_ns })?.rate_mqbps();
        Ok(())
    })
}
