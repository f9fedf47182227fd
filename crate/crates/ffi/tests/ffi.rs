use std::ffi::{CStr, CString};
use std::ptr;

use llmcd::hardware::fixtures as systems;
use llmcd::model::fixtures as models;
use llmcd_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = llmcd_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

const GPT3_FULLFLAT: &str = r#"{"tp":16,"pp":2,"dp":512,"ep":1,"es":16,"dp_exp":512,
    "microbatch":1,"interleave":48,"recompute":"none","zero":"z2","tp_comm":"rs_ag",
    "tp_overlap":"ring","dp_overlap":true,"fused_activation":true,"offload_opt":true}"#;

struct Handles {
    model: *mut LlmcdModel,
    system: *mut LlmcdSystem,
}

impl Handles {
    fn gpt3_fullflat() -> Self {
        let mut model = ptr::null_mut();
        let mut system = ptr::null_mut();
        unsafe {
            let m = cstr(models::GPT3_175B_JSON);
            assert_eq!(
                llmcd_model_from_json(m.as_ptr(), &mut model),
                LlmcdStatus::Ok
            );
            let s = cstr(systems::FULLFLAT_JSON);
            assert_eq!(
                llmcd_system_from_json(s.as_ptr(), &mut system),
                LlmcdStatus::Ok
            );
        }
        Handles { model, system }
    }
}

impl Drop for Handles {
    fn drop(&mut self) {
        unsafe {
            llmcd_model_free(self.model);
            llmcd_system_free(self.system);
        }
    }
}

#[test]
fn estimate_matches_library() {
    let h = Handles::gpt3_fullflat();
    let strat = cstr(GPT3_FULLFLAT);
    let mut est = ptr::null_mut();
    let status = unsafe { llmcd_estimate(h.model, h.system, strat.as_ptr(), 1024, 0, &mut est) };
    assert_eq!(status, LlmcdStatus::Ok, "{}", last_error());

    let model = models::gpt3_175b();
    let s: llmcd::Strategy = serde_json::from_str(GPT3_FULLFLAT).unwrap();
    let direct = llmcd::estimate(&model, &systems::fullflat(), &s, 1024, model.seq_len).unwrap();
    unsafe {
        assert_eq!(llmcd_estimate_step_time(est), direct.step_time);
        assert_eq!(llmcd_estimate_tokens_per_sec(est), direct.tokens_per_sec);
        assert_eq!(llmcd_estimate_mfu(est), direct.mfu);
        assert_eq!(
            llmcd_estimate_tier1_bytes(est),
            direct.footprint.tier1_total
        );

        let json = llmcd_estimate_to_json(est);
        assert!(!json.is_null());
        let v: serde_json::Value =
            serde_json::from_str(CStr::from_ptr(json).to_str().unwrap()).unwrap();
        assert_eq!(v["step_time"].as_f64().unwrap(), direct.step_time);
        llmcd_string_free(json);
        llmcd_estimate_free(est);
    }
}

#[test]
fn total_params_reported() {
    let h = Handles::gpt3_fullflat();
    let n = unsafe { llmcd_model_total_params(h.model) };
    assert!((n as f64 / 175e9 - 1.0).abs() < 0.02, "{n}");
}

#[test]
fn null_arguments_rejected() {
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(
            llmcd_model_from_json(ptr::null(), &mut model),
            LlmcdStatus::NullArgument
        );
        assert!(model.is_null());
        let m = cstr(models::GPT3_175B_JSON);
        assert_eq!(
            llmcd_model_from_json(m.as_ptr(), ptr::null_mut()),
            LlmcdStatus::NullArgument
        );
        let mut est = ptr::null_mut();
        let s = cstr(GPT3_FULLFLAT);
        assert_eq!(
            llmcd_estimate(ptr::null(), ptr::null(), s.as_ptr(), 1024, 0, &mut est),
            LlmcdStatus::NullArgument
        );
        assert!(llmcd_estimate_step_time(ptr::null()).is_nan());
        assert!(llmcd_estimate_to_json(ptr::null()).is_null());
        assert_eq!(llmcd_model_total_params(ptr::null()), 0);
        // Freeing null is a no-op.
        llmcd_model_free(ptr::null_mut());
        llmcd_system_free(ptr::null_mut());
        llmcd_estimate_free(ptr::null_mut());
        llmcd_string_free(ptr::null_mut());
    }
}

#[test]
fn invalid_utf8_rejected() {
    let bytes = [0xffu8, 0xfe, 0];
    let mut model = ptr::null_mut();
    let status = unsafe { llmcd_model_from_json(bytes.as_ptr().cast(), &mut model) };
    assert_eq!(status, LlmcdStatus::InvalidUtf8);
    assert!(last_error().contains("UTF-8"));
}

#[test]
fn parse_error_reported() {
    let mut model = ptr::null_mut();
    let bad = cstr("{\"num_layers\": ");
    let status = unsafe { llmcd_model_from_json(bad.as_ptr(), &mut model) };
    assert_eq!(status, LlmcdStatus::Parse);
    assert!(!last_error().is_empty());
}

#[test]
fn invalid_strategy_names_constraint() {
    let h = Handles::gpt3_fullflat();
    let strat =
        cstr(r#"{"tp":5,"pp":1,"dp":1,"ep":1,"es":5,"dp_exp":1,"microbatch":1,"interleave":1}"#);
    let mut est = ptr::null_mut();
    let status = unsafe { llmcd_estimate(h.model, h.system, strat.as_ptr(), 1024, 0, &mut est) };
    assert_eq!(status, LlmcdStatus::Invalid);
    assert!(est.is_null());
    assert!(last_error().contains("H mod tp"), "{}", last_error());
}

#[test]
fn infeasible_strategy_status() {
    let h = Handles::gpt3_fullflat();
    // One GPU cannot hold 175B parameters.
    let strat =
        cstr(r#"{"tp":1,"pp":1,"dp":1,"ep":1,"es":1,"dp_exp":1,"microbatch":1,"interleave":1}"#);
    let mut est = ptr::null_mut();
    let status = unsafe { llmcd_estimate(h.model, h.system, strat.as_ptr(), 1, 0, &mut est) };
    assert_eq!(status, LlmcdStatus::Infeasible);
    assert!(est.is_null());
}

#[test]
fn last_error_is_per_thread() {
    let mut model = ptr::null_mut();
    let bad = cstr("not json");
    unsafe { llmcd_model_from_json(bad.as_ptr(), &mut model) };
    let here = last_error();
    let other = std::thread::spawn(|| llmcd_last_error().is_null())
        .join()
        .unwrap();
    assert!(other);
    assert!(!here.is_empty());
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/llmcd.h");
    for sym in [
        "llmcd_last_error",
        "llmcd_model_from_json",
        "llmcd_model_free",
        "llmcd_model_total_params",
        "llmcd_system_from_json",
        "llmcd_system_free",
        "llmcd_estimate(",
        "llmcd_estimate_free",
        "llmcd_estimate_step_time",
        "llmcd_estimate_tokens_per_sec",
        "llmcd_estimate_mfu",
        "llmcd_estimate_tier1_bytes",
        "llmcd_estimate_to_json",
        "llmcd_string_free",
        "LLMCD_STATUS_INFEASIBLE",
        "typedef struct LlmcdModel LlmcdModel",
    ] {
        assert!(header.contains(sym), "header missing {sym}");
    }
}
