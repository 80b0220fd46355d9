//! C ABI over the flowsde oracles and samplers.
//!
//! The surface is deliberately small: construct a data model and an
//! exploration schedule behind opaque handles, query exact posterior means,
//! and run whole sampling rollouts into a caller-owned buffer. Every entry
//! point returns a status code; `flowsde_last_error` exposes the most recent
//! failure message for the calling thread.
//!
//! Contract notes:
//! - Handles are created by the `*_new`-style constructors and released by
//!   the matching `*_free`; passing a handle to any function after freeing
//!   it is undefined behavior, as in any C API.
//! - Out-pointers are written only on `FLOW_SDE_STATUS_OK`.
//! - All functions catch Rust panics and convert them into
//!   `FLOW_SDE_STATUS_PANIC`; the process is never unwound across the
//!   boundary.
//! - The library is thread-safe: handles are immutable after construction
//!   and may be shared across threads; the error message is thread-local.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use flowsde::{
    rollout, DataModel, Error, ExplorationSchedule, RolloutConfig, StepRule, TimeGrid,
};

/// Status code returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowSdeStatus {
    /// Success; out-parameters are valid.
    FlowSdeStatusOk = 0,
    /// A required pointer argument was null.
    FlowSdeStatusNullPointer = 1,
    /// An argument failed validation (bad length, unknown name, bad value).
    FlowSdeStatusInvalidArgument = 2,
    /// A numeric argument lay outside its mathematical domain.
    FlowSdeStatusDomain = 3,
    /// The output buffer length does not match what the call produces.
    FlowSdeStatusBufferMismatch = 4,
    /// An internal panic was caught at the boundary.
    FlowSdeStatusPanic = 5,
}

use FlowSdeStatus::*;

/// Opaque handle over a data model with an exact posterior oracle.
pub struct FlowSdeModel {
    inner: DataModel,
}

/// Opaque handle over an exploration-noise schedule.
pub struct FlowSdeSchedule {
    inner: ExplorationSchedule,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> FlowSdeStatus {
    match err {
        Error::Domain { .. } => FlowSdeStatusDomain,
        Error::Dim { .. } => FlowSdeStatusBufferMismatch,
        _ => FlowSdeStatusInvalidArgument,
    }
}

/// Run a closure at the ABI boundary, translating errors and panics.
fn guarded<F: FnOnce() -> Result<FlowSdeStatus, Error>>(body: F) -> FlowSdeStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(status)) => status,
        Ok(Err(err)) => {
            set_error(&err.to_string());
            status_of(&err)
        }
        Err(_) => {
            set_error("internal panic caught at the C boundary");
            FlowSdeStatusPanic
        }
    }
}

fn null_error(name: &str) -> FlowSdeStatus {
    set_error(&format!("{name} must not be null"));
    FlowSdeStatusNullPointer
}

/// Most recent error message for this thread, as a NUL-terminated string.
///
/// The pointer stays valid until the next failing call on the same thread.
/// Returns an empty string if no error has occurred yet.
#[no_mangle]
pub extern "C" fn flowsde_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

fn write_model(out: *mut *mut FlowSdeModel, model: DataModel) -> FlowSdeStatus {
    let handle = Box::new(FlowSdeModel { inner: model });
    unsafe { *out = Box::into_raw(handle) };
    FlowSdeStatusOk
}

/// Point-mass data model at `point` (dimension `dim`).
///
/// # Safety
/// `point` must reference `dim` readable doubles and `out` must be a valid
/// out-pointer.
#[no_mangle]
pub unsafe extern "C" fn flowsde_model_point_mass(
    point: *const f64,
    dim: usize,
    out: *mut *mut FlowSdeModel,
) -> FlowSdeStatus {
    if out.is_null() {
        return null_error("out");
    }
    if point.is_null() {
        return null_error("point");
    }
    let values = unsafe { std::slice::from_raw_parts(point, dim) }.to_vec();
    guarded(|| Ok(write_model(out, DataModel::point_mass(values)?)))
}

/// Diagonal Gaussian data model with the given mean and per-axis variance.
///
/// # Safety
/// `mean` and `variance` must reference `dim` readable doubles and `out`
/// must be a valid out-pointer.
#[no_mangle]
pub unsafe extern "C" fn flowsde_model_diagonal_gaussian(
    mean: *const f64,
    variance: *const f64,
    dim: usize,
    out: *mut *mut FlowSdeModel,
) -> FlowSdeStatus {
    if out.is_null() {
        return null_error("out");
    }
    if mean.is_null() {
        return null_error("mean");
    }
    if variance.is_null() {
        return null_error("variance");
    }
    let m = unsafe { std::slice::from_raw_parts(mean, dim) }.to_vec();
    let v = unsafe { std::slice::from_raw_parts(variance, dim) }.to_vec();
    guarded(|| Ok(write_model(out, DataModel::diagonal_gaussian(m, v)?)))
}

/// Equal-mass two-ring mixture in the plane with `points_per_ring` support
/// points on each of the two radii.
///
/// # Safety
/// `out` must be a valid out-pointer.
#[no_mangle]
pub unsafe extern "C" fn flowsde_model_double_ring(
    radius_inner: f64,
    radius_outer: f64,
    points_per_ring: usize,
    out: *mut *mut FlowSdeModel,
) -> FlowSdeStatus {
    if out.is_null() {
        return null_error("out");
    }
    guarded(|| {
        let model = flowsde::oracle::make_double_ring((radius_inner, radius_outer), points_per_ring)?;
        Ok(write_model(out, model))
    })
}

/// Dimension of the model's state space; 0 if `model` is null.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn flowsde_model_dim(model: *const FlowSdeModel) -> usize {
    if model.is_null() {
        return 0;
    }
    unsafe { &*model }.inner.dim()
}

/// Release a model handle. Null is accepted and ignored.
///
/// # Safety
/// `model` must be a handle returned by a constructor, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn flowsde_model_free(model: *mut FlowSdeModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

fn write_schedule(out: *mut *mut FlowSdeSchedule, s: ExplorationSchedule) -> FlowSdeStatus {
    let handle = Box::new(FlowSdeSchedule { inner: s });
    unsafe { *out = Box::into_raw(handle) };
    FlowSdeStatusOk
}

/// Constant exploration schedule eps_t = eta (eta >= 0).
///
/// # Safety
/// `out` must be a valid out-pointer.
#[no_mangle]
pub unsafe extern "C" fn flowsde_schedule_constant(
    eta: f64,
    out: *mut *mut FlowSdeSchedule,
) -> FlowSdeStatus {
    if out.is_null() {
        return null_error("out");
    }
    guarded(|| Ok(write_schedule(out, ExplorationSchedule::constant(eta)?)))
}

/// Log-SNR-uniform exploration schedule eps_t = eta sqrt(t / (1 - t)).
///
/// # Safety
/// `out` must be a valid out-pointer.
#[no_mangle]
pub unsafe extern "C" fn flowsde_schedule_log_snr(
    eta: f64,
    out: *mut *mut FlowSdeSchedule,
) -> FlowSdeStatus {
    if out.is_null() {
        return null_error("out");
    }
    guarded(|| Ok(write_schedule(out, ExplorationSchedule::log_snr(eta)?)))
}

/// Release a schedule handle. Null is accepted and ignored.
///
/// # Safety
/// `schedule` must be a handle returned by a constructor, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn flowsde_schedule_free(schedule: *mut FlowSdeSchedule) {
    if !schedule.is_null() {
        drop(unsafe { Box::from_raw(schedule) });
    }
}

/// Exact posterior mean E[z0 | z_t = z] of the model at time t in (0, 1].
///
/// `z` and `out_mean` must both have length `len` equal to the model
/// dimension.
///
/// # Safety
/// `model` must be a live handle; `z` must reference `len` readable doubles;
/// `out_mean` must reference `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn flowsde_posterior_mean(
    model: *const FlowSdeModel,
    z: *const f64,
    len: usize,
    t: f64,
    out_mean: *mut f64,
) -> FlowSdeStatus {
    if model.is_null() {
        return null_error("model");
    }
    if z.is_null() {
        return null_error("z");
    }
    if out_mean.is_null() {
        return null_error("out_mean");
    }
    let model = unsafe { &*model };
    if len != model.inner.dim() {
        set_error(&format!(
            "buffer length {len} does not match model dimension {}",
            model.inner.dim()
        ));
        return FlowSdeStatusBufferMismatch;
    }
    let z = unsafe { std::slice::from_raw_parts(z, len) };
    let out = unsafe { std::slice::from_raw_parts_mut(out_mean, len) };
    guarded(|| {
        let mut scratch = model.inner.scratch();
        model.inner.posterior_mean_into(z, t, &mut scratch, out)?;
        Ok(FlowSdeStatusOk)
    })
}

/// Run a full sampling rollout from t = 1 to t = 0 and write the final
/// states, row-major by sample, into `out` (length `n_samples * dim`).
///
/// `rule` is one of "euler", "cps", "cps-local", "cps-euler-energy",
/// "cps-matched", "frozen-mean". Identical (seed, rule, grid) inputs yield
/// bit-identical output regardless of caller threading.
///
/// # Safety
/// `model` and `schedule` must be live handles; `rule` must be a
/// NUL-terminated string; `out` must reference `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn flowsde_rollout(
    model: *const FlowSdeModel,
    schedule: *const FlowSdeSchedule,
    rule: *const c_char,
    n_steps: u32,
    n_samples: usize,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> FlowSdeStatus {
    if model.is_null() {
        return null_error("model");
    }
    if schedule.is_null() {
        return null_error("schedule");
    }
    if rule.is_null() {
        return null_error("rule");
    }
    if out.is_null() {
        return null_error("out");
    }
    let model = unsafe { &*model };
    let schedule = unsafe { &*schedule };
    let rule = match unsafe { CStr::from_ptr(rule) }.to_str() {
        Ok(name) => name,
        Err(_) => {
            set_error("rule is not valid UTF-8");
            return FlowSdeStatusInvalidArgument;
        }
    };
    let expected = n_samples * model.inner.dim();
    if out_len != expected {
        set_error(&format!(
            "out_len {out_len} does not match n_samples * dim = {expected}"
        ));
        return FlowSdeStatusBufferMismatch;
    }
    let out = unsafe { std::slice::from_raw_parts_mut(out, out_len) };
    guarded(|| {
        let rule = StepRule::parse(rule)?;
        let grid = TimeGrid::uniform(n_steps as usize)?;
        let config = RolloutConfig::new(grid, n_samples, seed);
        let finals = rollout(&model.inner, &schedule.inner, rule, &config)?.finals;
        out.copy_from_slice(finals.data());
        Ok(FlowSdeStatusOk)
    })
}
