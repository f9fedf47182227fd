//! C ABI over the step-time model.
//!
//! Inputs are JSON documents in the same formats the CLI reads. Every
//! fallible call returns an `LlmcdStatus`; on failure a message is kept per
//! thread and can be read with `llmcd_last_error`. Handles are opaque and
//! must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use llmcd::{Error, ModelSpec, RunEstimate, Strategy, SystemSpec};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LlmcdStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    Invalid = 4,
    Infeasible = 5,
    Internal = 6,
}

pub struct LlmcdModel(ModelSpec);

pub struct LlmcdSystem(SystemSpec);

pub struct LlmcdEstimate(RunEstimate);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> LlmcdStatus {
    match e {
        Error::Json { .. } => LlmcdStatus::Parse,
        Error::Infeasible(_) => LlmcdStatus::Infeasible,
        Error::Io { .. } | Error::Csv(_) => LlmcdStatus::Internal,
        _ => LlmcdStatus::Invalid,
    }
}

/// Runs `f`, turning errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), (LlmcdStatus, String)>) -> LlmcdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LlmcdStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LlmcdStatus::Internal
        }
    }
}

fn fail(e: Error) -> (LlmcdStatus, String) {
    (status_of(&e), e.to_string())
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, (LlmcdStatus, String)> {
    if p.is_null() {
        return Err((LlmcdStatus::NullArgument, "null string argument".into()));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        (
            LlmcdStatus::InvalidUtf8,
            "argument is not valid UTF-8".into(),
        )
    })
}

fn parse_error(e: serde_json::Error) -> (LlmcdStatus, String) {
    (LlmcdStatus::Parse, e.to_string())
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn llmcd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn llmcd_model_from_json(
    json: *const c_char,
    out: *mut *mut LlmcdModel,
) -> LlmcdStatus {
    guard(|| {
        if out.is_null() {
            return Err((LlmcdStatus::NullArgument, "null out pointer".into()));
        }
        let m = ModelSpec::from_json(read_str(json)?).map_err(parse_error)?;
        m.validate().map_err(fail)?;
        *out = Box::into_raw(Box::new(LlmcdModel(m)));
        Ok(())
    })
}

/// # Safety
/// `m` must come from `llmcd_model_from_json` or be null.
#[no_mangle]
pub unsafe extern "C" fn llmcd_model_free(m: *mut LlmcdModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Total parameter count, or 0 on error.
///
/// # Safety
/// `m` must be a live model handle.
#[no_mangle]
pub unsafe extern "C" fn llmcd_model_total_params(m: *const LlmcdModel) -> u64 {
    if m.is_null() {
        set_error("null model");
        return 0;
    }
    match llmcd::model::count_params(&(*m).0) {
        Ok(p) => p.total_params,
        Err(e) => {
            set_error(e.to_string());
            0
        }
    }
}

/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn llmcd_system_from_json(
    json: *const c_char,
    out: *mut *mut LlmcdSystem,
) -> LlmcdStatus {
    guard(|| {
        if out.is_null() {
            return Err((LlmcdStatus::NullArgument, "null out pointer".into()));
        }
        let s = SystemSpec::from_json(read_str(json)?).map_err(parse_error)?;
        *out = Box::into_raw(Box::new(LlmcdSystem(s)));
        Ok(())
    })
}

/// # Safety
/// `s` must come from `llmcd_system_from_json` or be null.
#[no_mangle]
pub unsafe extern "C" fn llmcd_system_free(s: *mut LlmcdSystem) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Estimate one strategy (JSON). `seq` of 0 uses the model's sequence length.
///
/// # Safety
/// Handles must be live; `strategy_json` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn llmcd_estimate(
    model: *const LlmcdModel,
    system: *const LlmcdSystem,
    strategy_json: *const c_char,
    batch: u64,
    seq: u64,
    out: *mut *mut LlmcdEstimate,
) -> LlmcdStatus {
    guard(|| {
        if model.is_null() || system.is_null() || out.is_null() {
            return Err((
                LlmcdStatus::NullArgument,
                "null handle or out pointer".into(),
            ));
        }
        let m = &(*model).0;
        let s: Strategy = serde_json::from_str(read_str(strategy_json)?).map_err(parse_error)?;
        let seq = if seq == 0 { m.seq_len } else { seq };
        let e = llmcd::estimate(m, &(*system).0, &s, batch, seq).map_err(fail)?;
        *out = Box::into_raw(Box::new(LlmcdEstimate(e)));
        Ok(())
    })
}

/// # Safety
/// `e` must come from `llmcd_estimate` or be null.
#[no_mangle]
pub unsafe extern "C" fn llmcd_estimate_free(e: *mut LlmcdEstimate) {
    if !e.is_null() {
        drop(Box::from_raw(e));
    }
}

/// Step time in seconds; NaN on a null handle.
///
/// # Safety
/// `e` must be a live estimate handle or null.
#[no_mangle]
pub unsafe extern "C" fn llmcd_estimate_step_time(e: *const LlmcdEstimate) -> f64 {
    if e.is_null() {
        return f64::NAN;
    }
    (*e).0.step_time
}

/// Throughput in tokens per second; NaN on a null handle.
///
/// # Safety
/// `e` must be a live estimate handle or null.
#[no_mangle]
pub unsafe extern "C" fn llmcd_estimate_tokens_per_sec(e: *const LlmcdEstimate) -> f64 {
    if e.is_null() {
        return f64::NAN;
    }
    (*e).0.tokens_per_sec
}

/// Model FLOPs utilization; NaN on a null handle.
///
/// # Safety
/// `e` must be a live estimate handle or null.
#[no_mangle]
pub unsafe extern "C" fn llmcd_estimate_mfu(e: *const LlmcdEstimate) -> f64 {
    if e.is_null() {
        return f64::NAN;
    }
    (*e).0.mfu
}

/// Per-GPU tier-1 bytes; NaN on a null handle.
///
/// # Safety
/// `e` must be a live estimate handle or null.
#[no_mangle]
pub unsafe extern "C" fn llmcd_estimate_tier1_bytes(e: *const LlmcdEstimate) -> f64 {
    if e.is_null() {
        return f64::NAN;
    }
    (*e).0.footprint.tier1_total
}

/// Full estimate as JSON; release with `llmcd_string_free`. Null on error.
///
/// # Safety
/// `e` must be a live estimate handle.
#[no_mangle]
pub unsafe extern "C" fn llmcd_estimate_to_json(e: *const LlmcdEstimate) -> *mut c_char {
    if e.is_null() {
        set_error("null estimate");
        return ptr::null_mut();
    }
    match serde_json::to_string(&(*e).0) {
        Ok(s) => CString::new(s).map_or(ptr::null_mut(), CString::into_raw),
        Err(err) => {
            set_error(err.to_string());
            ptr::null_mut()
        }
    }
}

/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn llmcd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
