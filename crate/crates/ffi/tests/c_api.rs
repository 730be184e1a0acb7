use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use contee::corpus::{generate_synthetic, write_corpus, SyntheticConfig};
use contee::eval::{write_predictions, PredictedSentence};
use contee_ffi::*;
use serde_json::Value;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> Option<String> {
    let p = contee_last_error();
    (!p.is_null()).then(|| unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string())
}

unsafe fn take(s: *mut c_char) -> String {
    let out = CStr::from_ptr(s).to_str().unwrap().to_string();
    contee_string_free(s);
    out
}

const TINY: &str = r#"
synthetic_types = 4
synthetic_max_count = 24
synthetic_min_count = 6
synthetic_vocab = 30
k = 2
memory_size = 2
feature_dim = 16
epochs = 1
n_layers = 1
attn_layers = 1
n_heads = 2
hidden_dim = 8
ffn_dim = 16
arg_epochs = 1
arg_feature_dim = 8
arg_gru_hidden = 4
"#;

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(contee_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_pointers_are_reported() {
    unsafe {
        assert_eq!(contee_config_new(ptr::null_mut()), ConteeStatus::NullPointer);
        assert!(last_error().unwrap().contains("null"));
        let mut cfg = ptr::null_mut();
        assert_eq!(contee_config_new(&mut cfg), ConteeStatus::Ok);
        assert!(last_error().is_none());
        assert_eq!(contee_run(ptr::null(), ptr::null_mut()), ConteeStatus::NullPointer);
        let mut out = ptr::null_mut();
        assert_eq!(
            contee_predict(ptr::null(), ptr::null(), ptr::null(), 0, &mut out),
            ConteeStatus::NullPointer
        );
        contee_config_free(cfg);
        contee_config_free(ptr::null_mut());
        contee_detector_free(ptr::null_mut());
        contee_arguments_free(ptr::null_mut());
        contee_string_free(ptr::null_mut());
    }
}

#[test]
fn config_errors_and_round_trip() {
    unsafe {
        let mut cfg = ptr::null_mut();
        let bad = cstr("tau = 3.0\n");
        assert_eq!(contee_config_from_toml(bad.as_ptr(), &mut cfg), ConteeStatus::Config);
        assert!(last_error().unwrap().contains("tau"));
        assert!(cfg.is_null());

        let unknown = cstr("no_such_key = 1\n");
        assert_eq!(contee_config_from_toml(unknown.as_ptr(), &mut cfg), ConteeStatus::Config);

        let missing = cstr("/nonexistent/run.toml");
        assert_eq!(contee_config_load(missing.as_ptr(), &mut cfg), ConteeStatus::Io);

        let bytes = [0xffu8, 0];
        assert_eq!(
            contee_config_from_toml(bytes.as_ptr().cast(), &mut cfg),
            ConteeStatus::InvalidUtf8
        );

        let text = cstr("k = 3\ntau = 0.9\n");
        assert_eq!(contee_config_from_toml(text.as_ptr(), &mut cfg), ConteeStatus::Ok, "{:?}", last_error());
        let dir = cstr("somewhere/else");
        assert_eq!(contee_config_set_output_dir(cfg, dir.as_ptr()), ConteeStatus::Ok);
        let mut out = ptr::null_mut();
        assert_eq!(contee_config_to_toml(cfg, &mut out), ConteeStatus::Ok);
        let toml = take(out);
        assert!(toml.contains("k = 3"));
        assert!(toml.contains("tau = 0.9"));
        assert!(toml.contains("somewhere/else"));
        contee_config_free(cfg);
    }
}

#[test]
fn run_then_load_and_predict() {
    let tmp = tempfile::tempdir().unwrap();
    unsafe {
        let mut cfg = ptr::null_mut();
        let text = cstr(TINY);
        assert_eq!(contee_config_from_toml(text.as_ptr(), &mut cfg), ConteeStatus::Ok, "{:?}", last_error());
        let out_dir = cstr(tmp.path().join("run").to_str().unwrap());
        assert_eq!(contee_config_set_output_dir(cfg, out_dir.as_ptr()), ConteeStatus::Ok);
        let mut report = ptr::null_mut();
        assert_eq!(contee_run(cfg, &mut report), ConteeStatus::Ok, "{:?}", last_error());
        let report: Value = serde_json::from_str(&take(report)).unwrap();
        assert_eq!(report["stages"].as_array().unwrap().len(), 2);
        contee_config_free(cfg);

        let stage = tmp.path().join("run/stage_2");
        let det_path = cstr(stage.join("detection.ckpt").to_str().unwrap());
        let arg_path = cstr(stage.join("arguments.ckpt").to_str().unwrap());
        let mut det = ptr::null_mut();
        let mut args = ptr::null_mut();
        assert_eq!(contee_detector_load(det_path.as_ptr(), &mut det), ConteeStatus::Ok);
        assert_eq!(contee_arguments_load(arg_path.as_ptr(), &mut args), ConteeStatus::Ok);

        let words: Vec<CString> = ["the", "w3", "w7", "w1"].iter().map(|w| cstr(w)).collect();
        let ptrs: Vec<*const c_char> = words.iter().map(|w| w.as_ptr()).collect();
        let mut out = ptr::null_mut();
        assert_eq!(
            contee_predict(det, args, ptrs.as_ptr(), ptrs.len(), &mut out),
            ConteeStatus::Ok,
            "{:?}",
            last_error()
        );
        let events: Value = serde_json::from_str(&take(out)).unwrap();
        for ev in events.as_array().unwrap() {
            assert!(ev["type"].is_string());
            assert!(ev["trigger"]["end"].as_u64().unwrap() < 4);
        }
        let mut out = ptr::null_mut();
        assert_eq!(
            contee_predict(det, ptr::null(), ptr::null(), 0, &mut out),
            ConteeStatus::InvalidArgument
        );
        assert!(last_error().is_some());

        // a detector checkpoint is not an argument checkpoint
        let mut wrong = ptr::null_mut();
        assert_eq!(contee_arguments_load(det_path.as_ptr(), &mut wrong), ConteeStatus::Checkpoint);
        assert!(wrong.is_null());

        contee_detector_free(det);
        contee_arguments_free(args);
    }
}

#[test]
fn evaluate_gold_against_itself() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, sentences) = generate_synthetic(&SyntheticConfig::new(vec![6, 4, 3], 20, 1)).unwrap();
    let gold = tmp.path().join("gold.jsonl");
    let preds = tmp.path().join("preds.jsonl");
    write_corpus(&gold, &sentences).unwrap();
    let copied: Vec<PredictedSentence> = sentences
        .iter()
        .map(|s| PredictedSentence {
            sentence_id: s.sentence_id.clone(),
            events: s.events.clone(),
        })
        .collect();
    write_predictions(&preds, &copied).unwrap();
    unsafe {
        let (p, g) = (cstr(preds.to_str().unwrap()), cstr(gold.to_str().unwrap()));
        let mut out = ptr::null_mut();
        assert_eq!(contee_evaluate(p.as_ptr(), g.as_ptr(), &mut out), ConteeStatus::Ok);
        let v: Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(v["detection"]["f1"].as_f64(), Some(1.0));
        assert_eq!(v["detection"]["n_gold"].as_u64(), Some(13));
        assert_eq!(v["arguments"]["f1"].as_f64(), Some(1.0));

        let missing = cstr(tmp.path().join("nope.jsonl").to_str().unwrap());
        assert_eq!(contee_evaluate(missing.as_ptr(), g.as_ptr(), &mut out), ConteeStatus::Io);
    }
}

fn compiler() -> Option<&'static str> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok())
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let Some(cc) = compiler() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("use.c");
    std::fs::write(
        &src,
        r#"#include "contee.h"
int use(void) {
    ConteeConfig *cfg = 0;
    const char *tokens[] = {"a", "b"};
    char *out = 0;
    if (contee_config_new(&cfg) != CONTEE_STATUS_OK) return 1;
    ConteeStatus s = contee_predict(0, 0, tokens, 2, &out);
    contee_string_free(out);
    contee_config_free(cfg);
    return s == CONTEE_STATUS_NULL_POINTER ? 0 : (int)s;
}
"#,
    )
    .unwrap();
    for lang in ["c", "c++"] {
        let status = Command::new(cc)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang, "-I"])
            .arg(&include)
            .arg(&src)
            .status()
            .unwrap();
        assert!(status.success(), "header failed to compile as {lang}");
    }
}
