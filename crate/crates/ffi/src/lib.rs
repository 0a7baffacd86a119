//! C ABI for the simulator.
//!
//! Every fallible function returns an [`HflStatus`]; on failure a message is
//! kept per thread and can be read with [`hfl_last_error`]. Simulators are
//! opaque handles created by [`hfl_simulator_new`] and released with
//! [`hfl_simulator_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use hyperfl::cli::{build_simulator, load_and_partition, parse_json, ExperimentConfig};
use hyperfl::fedsim::Simulator;
use hyperfl::metrics::{psnr, ssim, to_csv, RoundRecord};
use hyperfl::{Error, Tensor};

/// Result of every fallible call. `HFL_STATUS_OK` is zero.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HflStatus {
    Ok = 0,
    Config = 1,
    Dimension = 2,
    Capability = 3,
    Capacity = 4,
    Numeric = 5,
    DegenerateGradient = 6,
    Io = 7,
    Format = 8,
    Consistency = 9,
    NullPointer = 10,
    InvalidUtf8 = 11,
    BufferTooSmall = 12,
    Panic = 13,
}

impl From<&Error> for HflStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) => HflStatus::Config,
            Error::Dimension(_) => HflStatus::Dimension,
            Error::Capability(_) => HflStatus::Capability,
            Error::Capacity(_) => HflStatus::Capacity,
            Error::Numeric(_) => HflStatus::Numeric,
            Error::DegenerateGradient(_) => HflStatus::DegenerateGradient,
            Error::Io { .. } => HflStatus::Io,
            Error::Format(_) => HflStatus::Format,
            Error::Consistency(_) => HflStatus::Consistency,
        }
    }
}

/// Opaque simulator handle.
pub struct HflSimulator {
    sim: Simulator,
    records: Vec<RoundRecord>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: HflStatus, msg: impl Into<String>) -> HflStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, turning errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), HflStatus>) -> HflStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HflStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(HflStatus::Panic, msg)
        }
    }
}

fn check(r: hyperfl::Result<()>) -> Result<(), HflStatus> {
    r.map_err(|e| fail((&e).into(), e.to_string()))
}

fn lift<T>(r: hyperfl::Result<T>) -> Result<T, HflStatus> {
    r.map_err(|e| fail((&e).into(), e.to_string()))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), HflStatus> {
    if p.is_null() {
        Err(fail(HflStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hfl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hfl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Builds a simulator from an experiment configuration in JSON and records
/// the initial state. `*out` is set only on success.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hfl_simulator_new(config_json: *const c_char, out: *mut *mut HflSimulator) -> HflStatus {
    guard(|| {
        non_null(config_json, "config_json")?;
        non_null(out, "out")?;
        let text = CStr::from_ptr(config_json)
            .to_str()
            .map_err(|e| fail(HflStatus::InvalidUtf8, e.to_string()))?;
        let cfg: ExperimentConfig = lift(parse_json(text, Path::new("<config>")))?;
        check(cfg.validate())?;
        let (ds, shards) = lift(load_and_partition(&cfg))?;
        let mut sim = lift(build_simulator(&cfg, &ds, &shards))?;
        let first = lift(sim.initial_record())?;
        *out = Box::into_raw(Box::new(HflSimulator {
            sim,
            records: vec![first],
        }));
        Ok(())
    })
}

/// Releases a simulator. Null is ignored.
///
/// # Safety
/// `sim` must come from [`hfl_simulator_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hfl_simulator_free(sim: *mut HflSimulator) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Runs one communication round. `mean_test_acc` may be null.
///
/// # Safety
/// `sim` must be a live handle; `mean_test_acc` null or writable.
#[no_mangle]
pub unsafe extern "C" fn hfl_simulator_run_round(sim: *mut HflSimulator, mean_test_acc: *mut f64) -> HflStatus {
    guard(|| {
        non_null(sim, "sim")?;
        let h = &mut *sim;
        let rec = lift(h.sim.run_round())?;
        if !mean_test_acc.is_null() {
            *mean_test_acc = rec.mean_test_acc();
        }
        h.records.push(rec);
        Ok(())
    })
}

/// Rounds completed so far.
///
/// # Safety
/// `sim` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hfl_simulator_round(sim: *const HflSimulator, out: *mut u64) -> HflStatus {
    guard(|| {
        non_null(sim, "sim")?;
        non_null(out, "out")?;
        *out = (*sim).sim.round() as u64;
        Ok(())
    })
}

/// # Safety
/// `sim` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hfl_simulator_num_clients(sim: *const HflSimulator, out: *mut usize) -> HflStatus {
    guard(|| {
        non_null(sim, "sim")?;
        non_null(out, "out")?;
        *out = (*sim).sim.clients.len();
        Ok(())
    })
}

/// Test accuracy of one client's current model.
///
/// # Safety
/// `sim` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hfl_simulator_client_accuracy(
    sim: *const HflSimulator,
    client: usize,
    out: *mut f64,
) -> HflStatus {
    guard(|| {
        non_null(sim, "sim")?;
        non_null(out, "out")?;
        let s = &(*sim).sim;
        if client >= s.clients.len() {
            return Err(fail(HflStatus::Config, format!("no client {client}")));
        }
        *out = lift(s.test_accuracy(client))?;
        Ok(())
    })
}

/// Copies the metrics CSV recorded so far into `buf`, NUL-terminated.
/// `*len` receives the CSV length without the terminator; when `cap` is too
/// small nothing is copied and `HFL_STATUS_BUFFER_TOO_SMALL` is returned, so
/// a call with `buf = NULL, cap = 0` queries the size.
///
/// # Safety
/// `sim` must be a live handle, `len` writable, and `buf` writable for
/// `cap` bytes unless null.
#[no_mangle]
pub unsafe extern "C" fn hfl_simulator_metrics_csv(
    sim: *const HflSimulator,
    buf: *mut c_char,
    cap: usize,
    len: *mut usize,
) -> HflStatus {
    guard(|| {
        non_null(sim, "sim")?;
        non_null(len, "len")?;
        let csv = to_csv(&(*sim).records);
        *len = csv.len();
        if buf.is_null() || cap <= csv.len() {
            return Err(fail(
                HflStatus::BufferTooSmall,
                format!("need {} bytes, have {cap}", csv.len() + 1),
            ));
        }
        std::ptr::copy_nonoverlapping(csv.as_ptr(), buf.cast(), csv.len());
        *buf.add(csv.len()) = 0;
        Ok(())
    })
}

unsafe fn tensor(p: *const f64, shape: &[usize], what: &str) -> Result<Tensor, HflStatus> {
    non_null(p, what)?;
    let n: usize = shape.iter().product();
    lift(Tensor::new(shape.to_vec(), std::slice::from_raw_parts(p, n).to_vec()))
}

/// Peak signal-to-noise ratio in dB of two arrays of `n` values.
///
/// # Safety
/// `a` and `b` must point to `n` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hfl_psnr(a: *const f64, b: *const f64, n: usize, max_val: f64, out: *mut f64) -> HflStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = lift(psnr(&tensor(a, &[n], "a")?, &tensor(b, &[n], "b")?, max_val))?;
        Ok(())
    })
}

/// Mean SSIM of two row-major `rows x cols` images with range 1.
///
/// # Safety
/// `a` and `b` must point to `rows * cols` readable doubles; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn hfl_ssim(
    a: *const f64,
    b: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
) -> HflStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = lift(ssim(&tensor(a, &[rows, cols], "a")?, &tensor(b, &[rows, cols], "b")?))?;
        Ok(())
    })
}
