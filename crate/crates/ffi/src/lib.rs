//! C ABI over `saver-core`.
//!
//! Every fallible call returns a [`SaverStatus`]; on failure the message is
//! available from [`saver_last_error`] on the same thread. Strings returned
//! through `char **` out-parameters are owned by the caller and must be
//! released with [`saver_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::DMatrix;
use saver_core::audit::{audit, unfaithful_step_rate, AuditMode, Lexicons};
use saver_core::eval::metrics::em_f1;
use saver_core::repair::{audit_repair_loop, RepairConfig, RepairContext};
use saver_core::selection::{kdpp_sample_seeded, KernelMatrix};
use saver_core::trajectory::{Belief, Task, Trajectory};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaverStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    ParseError = 3,
    InvalidArgument = 4,
    Internal = 5,
}

/// Opaque task handle.
pub struct SaverTask {
    inner: Task,
}

/// Opaque trajectory handle.
pub struct SaverTrajectory {
    inner: Trajectory,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

struct Failure(SaverStatus, String);

type Outcome = Result<(), Failure>;

fn fail<T>(status: SaverStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

/// Runs `f`, records any failure and turns panics into `Internal`.
fn guard(f: impl FnOnce() -> Outcome) -> SaverStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SaverStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SaverStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return fail(SaverStatus::NullArgument, format!("{name} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(SaverStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    // SAFETY: callers pass either null or a live handle from this library.
    unsafe { p.as_ref() }.ok_or_else(|| Failure(SaverStatus::NullArgument, format!("{name} is null")))
}

fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: callers pass either null or a writable location.
    unsafe { p.as_mut() }.ok_or_else(|| Failure(SaverStatus::NullArgument, format!("{name} is null")))
}

fn json_out(value: &impl serde::Serialize, out: &mut *mut c_char) -> Outcome {
    let s = serde_json::to_string(value).or_else(|e| fail(SaverStatus::Internal, e.to_string()))?;
    *out = CString::new(s).expect("JSON has no nul bytes").into_raw();
    Ok(())
}

fn empty_task() -> Task {
    Task {
        id: "ffi".into(),
        question: String::new(),
        contexts: vec![],
        gold_answers: vec![],
    }
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn saver_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Parses a task from JSON into a new handle.
///
/// # Safety
/// `json` must be null or a nul-terminated string; `out` must be null or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn saver_task_from_json(json: *const c_char, out: *mut *mut SaverTask) -> SaverStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let raw = str_arg(json, "json")?;
        let inner: Task = serde_json::from_str(raw).or_else(|e| fail(SaverStatus::ParseError, e.to_string()))?;
        *out = Box::into_raw(Box::new(SaverTask { inner }));
        Ok(())
    })
}

/// # Safety
/// `task` must be null or a handle from [`saver_task_from_json`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn saver_task_free(task: *mut SaverTask) {
    if !task.is_null() {
        drop(Box::from_raw(task));
    }
}

/// Parses a trajectory (`{"steps": [...]}`) from JSON into a new handle.
///
/// # Safety
/// `json` must be null or a nul-terminated string; `out` must be null or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn saver_trajectory_from_json(
    json: *const c_char,
    out: *mut *mut SaverTrajectory,
) -> SaverStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let raw = str_arg(json, "json")?;
        let inner: Trajectory =
            serde_json::from_str(raw).or_else(|e| fail(SaverStatus::ParseError, e.to_string()))?;
        *out = Box::into_raw(Box::new(SaverTrajectory { inner }));
        Ok(())
    })
}

/// # Safety
/// `trajectory` must be null or a handle from
/// [`saver_trajectory_from_json`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn saver_trajectory_free(trajectory: *mut SaverTrajectory) {
    if !trajectory.is_null() {
        drop(Box::from_raw(trajectory));
    }
}

/// Step count, or 0 for a null handle.
///
/// # Safety
/// `trajectory` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn saver_trajectory_len(trajectory: *const SaverTrajectory) -> usize {
    trajectory.as_ref().map_or(0, |t| t.inner.len())
}

/// Rule-mode audit; writes the violation instances as a JSON array.
/// `task` may be null, in which case no evidence documents are available.
///
/// # Safety
/// Handles must be null or live; `out_json` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn saver_audit_json(
    trajectory: *const SaverTrajectory,
    task: *const SaverTask,
    out_json: *mut *mut c_char,
) -> SaverStatus {
    guard(|| {
        let out = out_arg(out_json, "out_json")?;
        *out = ptr::null_mut();
        let t = ref_arg(trajectory, "trajectory")?;
        let fallback = empty_task();
        let task = task.as_ref().map_or(&fallback, |t| &t.inner);
        let found = audit(&t.inner, task, AuditMode::Rule, &Lexicons::default(), None);
        json_out(&found.instances, out)
    })
}

/// Rule-mode audit and repair loop with up to `r_max` rounds; writes the
/// full outcome (final trajectory, residual violations, per-round trace)
/// as JSON.
///
/// # Safety
/// Handles must be null or live; `out_json` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn saver_repair_json(
    trajectory: *const SaverTrajectory,
    task: *const SaverTask,
    r_max: u32,
    out_json: *mut *mut c_char,
) -> SaverStatus {
    guard(|| {
        let out = out_arg(out_json, "out_json")?;
        *out = ptr::null_mut();
        let t = ref_arg(trajectory, "trajectory")?;
        if r_max == 0 {
            return fail(SaverStatus::InvalidArgument, "r_max must be at least 1");
        }
        let fallback = empty_task();
        let task = task.as_ref().map_or(&fallback, |t| &t.inner);
        let config = RepairConfig {
            r_max: r_max as usize,
            ..RepairConfig::default()
        };
        let ctx = RepairContext {
            task,
            config: &config,
            llm: None,
        };
        let belief = Belief {
            persona_id: "ffi".into(),
            claim: t.inner.conclusion().map(|c| c.text.clone()).unwrap_or_default(),
            trajectory: t.inner.clone(),
            degraded: false,
        };
        json_out(&audit_repair_loop(&belief, task, &ctx), out)
    })
}

/// Share of steps flagged by a rule-mode audit.
///
/// # Safety
/// Handles must be null or live; `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn saver_unfaithfulness_rate(
    trajectory: *const SaverTrajectory,
    task: *const SaverTask,
    out: *mut f64,
) -> SaverStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let t = ref_arg(trajectory, "trajectory")?;
        let fallback = empty_task();
        let task = task.as_ref().map_or(&fallback, |t| &t.inner);
        let found = audit(&t.inner, task, AuditMode::Rule, &Lexicons::default(), None);
        *out = unfaithful_step_rate(&t.inner, &found.instances);
        Ok(())
    })
}

/// Draws a size-`k` subset from the k-DPP of the row-major `m x m` kernel
/// and writes the sorted 0-based indices to `out_indices[0..k]`.
///
/// # Safety
/// `kernel` must point to `m * m` doubles and `out_indices` to room for `k`
/// values (either may be null, which is reported).
#[no_mangle]
pub unsafe extern "C" fn saver_kdpp_sample(
    kernel: *const f64,
    m: usize,
    k: usize,
    seed: u64,
    out_indices: *mut usize,
) -> SaverStatus {
    guard(|| {
        if kernel.is_null() || out_indices.is_null() {
            return fail(SaverStatus::NullArgument, "kernel and out_indices must be non-null");
        }
        if m == 0 || k == 0 || k > m {
            return fail(SaverStatus::InvalidArgument, format!("need 1 <= k <= m, got k={k} m={m}"));
        }
        let Some(len) = m.checked_mul(m) else {
            return fail(SaverStatus::InvalidArgument, "kernel size overflows");
        };
        let values = std::slice::from_raw_parts(kernel, len);
        let entries = DMatrix::from_row_slice(m, m, values);
        let km = KernelMatrix::from_entries(entries, vec![0.0; m])
            .or_else(|e| fail(SaverStatus::InvalidArgument, e.to_string()))?;
        let sample = kdpp_sample_seeded(&km, k, seed).or_else(|e| fail(SaverStatus::InvalidArgument, e.to_string()))?;
        let out = std::slice::from_raw_parts_mut(out_indices, k);
        out.copy_from_slice(&sample.indices);
        Ok(())
    })
}

/// Exact match and token F1 of `prediction` against `n_golds` gold answers.
///
/// # Safety
/// `prediction` must be a nul-terminated string and `golds` must point to
/// `n_golds` of them; `em` and `f1` must be writable.
#[no_mangle]
pub unsafe extern "C" fn saver_em_f1(
    prediction: *const c_char,
    golds: *const *const c_char,
    n_golds: usize,
    em: *mut u8,
    f1: *mut f64,
) -> SaverStatus {
    guard(|| {
        let em = out_arg(em, "em")?;
        let f1 = out_arg(f1, "f1")?;
        let pred = str_arg(prediction, "prediction")?;
        if golds.is_null() || n_golds == 0 {
            return fail(SaverStatus::InvalidArgument, "at least one gold answer is required");
        }
        let golds = std::slice::from_raw_parts(golds, n_golds)
            .iter()
            .enumerate()
            .map(|(i, &g)| str_arg(g, &format!("golds[{i}]")).map(str::to_string))
            .collect::<Result<Vec<_>, _>>()?;
        let (e, f) = em_f1(pred, &golds);
        *em = e;
        *f1 = f;
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn saver_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
