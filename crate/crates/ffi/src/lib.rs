//! C ABI over `contee`.
//!
//! Every fallible call returns a [`ConteeStatus`]; on failure the message is
//! kept per thread and read back with [`contee_last_error`]. Objects cross the
//! boundary as opaque handles that the caller frees with the matching
//! `*_free` function. Strings handed out by the library are NUL-terminated
//! UTF-8 and must be released with [`contee_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use contee::arguments::ArgumentModel;
use contee::config::RunConfig;
use contee::corpus::{load_corpus, TokenizedSentence};
use contee::detection::DetectionModel;
use contee::eval::{argument_f1, detection_f1, load_predictions, PredictedSentence};
use contee::pipeline::run;
use contee::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConteeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Parse = 5,
    Config = 6,
    Checkpoint = 7,
    NotReady = 8,
    Internal = 9,
    Panic = 10,
}

/// Run configuration.
pub struct ConteeConfig(RunConfig);

/// Trained trigger detector.
pub struct ConteeDetector(DetectionModel);

/// Trained argument extractor.
pub struct ConteeArguments(ArgumentModel);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(ConteeStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => ConteeStatus::Io,
            Error::Parse { .. } | Error::Json(_) | Error::Csv(_) => ConteeStatus::Parse,
            Error::Config(_) => ConteeStatus::Config,
            Error::Checkpoint { .. } => ConteeStatus::Checkpoint,
            Error::NotReady(_) => ConteeStatus::NotReady,
            Error::InvalidArgument(_) | Error::SentenceTooLong { .. } | Error::Validation(_) => {
                ConteeStatus::InvalidArgument
            }
            Error::Shape(_) => ConteeStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(ConteeStatus::Internal, e.to_string())
    }
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ConteeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            ConteeStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {message}"));
            ConteeStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(ConteeStatus::NullPointer, format!("{what} is null"))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(ConteeStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn read_tokens(tokens: *const *const c_char, n: usize) -> Result<Vec<String>, Failure> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if tokens.is_null() {
        return Err(null("tokens"));
    }
    std::slice::from_raw_parts(tokens, n)
        .iter()
        .map(|&t| read_str(t, "token").map(str::to_string))
        .collect()
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    let c = CString::new(s).map_err(|e| Failure(ConteeStatus::Internal, e.to_string()))?;
    *out = c.into_raw();
    Ok(())
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn contee_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn contee_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must come from this library, or be null.
#[no_mangle]
pub unsafe extern "C" fn contee_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Default configuration.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn contee_config_new(out: *mut *mut ConteeConfig) -> ConteeStatus {
    guard(|| put(out, ConteeConfig(RunConfig::default())))
}

/// Configuration parsed from TOML text; missing keys take their defaults.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn contee_config_from_toml(toml: *const c_char, out: *mut *mut ConteeConfig) -> ConteeStatus {
    guard(|| {
        let text = read_str(toml, "toml")?;
        let cfg: RunConfig = ::toml::from_str(text).map_err(|e| Failure(ConteeStatus::Config, e.to_string()))?;
        cfg.validate()?;
        put(out, ConteeConfig(cfg))
    })
}

/// Configuration read from a TOML file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn contee_config_load(path: *const c_char, out: *mut *mut ConteeConfig) -> ConteeStatus {
    guard(|| {
        let path = PathBuf::from(read_str(path, "path")?);
        put(out, ConteeConfig(RunConfig::load(&path)?))
    })
}

/// # Safety
/// `cfg` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn contee_config_set_output_dir(cfg: *mut ConteeConfig, dir: *const c_char) -> ConteeStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("config"))?;
        cfg.0.output_dir = PathBuf::from(read_str(dir, "dir")?);
        Ok(())
    })
}

/// Serializes the configuration as TOML.
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn contee_config_to_toml(cfg: *const ConteeConfig, out: *mut *mut c_char) -> ConteeStatus {
    guard(|| {
        let cfg = borrow(cfg, "config")?;
        let text = ::toml::to_string(&cfg.0).map_err(|e| Failure(ConteeStatus::Internal, e.to_string()))?;
        put_string(out, text)
    })
}

/// # Safety
/// `cfg` must come from this library, or be null.
#[no_mangle]
pub unsafe extern "C" fn contee_config_free(cfg: *mut ConteeConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Trains every stage of the configured stream and writes its artifacts to
/// the output directory. `report_json`, when not null, receives the run
/// report as JSON.
///
/// # Safety
/// `cfg` must be a live handle; `report_json` a valid pointer or null.
#[no_mangle]
pub unsafe extern "C" fn contee_run(cfg: *const ConteeConfig, report_json: *mut *mut c_char) -> ConteeStatus {
    guard(|| {
        let cfg = borrow(cfg, "config")?;
        let outcome = run(&cfg.0)?;
        if report_json.is_null() {
            return Ok(());
        }
        put_string(report_json, serde_json::to_string(&outcome.report)?)
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn contee_detector_load(path: *const c_char, out: *mut *mut ConteeDetector) -> ConteeStatus {
    guard(|| {
        let path = PathBuf::from(read_str(path, "path")?);
        put(out, ConteeDetector(DetectionModel::load(&path)?))
    })
}

/// # Safety
/// `det` must come from this library, or be null.
#[no_mangle]
pub unsafe extern "C" fn contee_detector_free(det: *mut ConteeDetector) {
    if !det.is_null() {
        drop(Box::from_raw(det));
    }
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn contee_arguments_load(path: *const c_char, out: *mut *mut ConteeArguments) -> ConteeStatus {
    guard(|| {
        let path = PathBuf::from(read_str(path, "path")?);
        put(out, ConteeArguments(ArgumentModel::load(&path)?))
    })
}

/// # Safety
/// `args` must come from this library, or be null.
#[no_mangle]
pub unsafe extern "C" fn contee_arguments_free(args: *mut ConteeArguments) {
    if !args.is_null() {
        drop(Box::from_raw(args));
    }
}

/// Detects the events of one tokenized sentence and, when `args` is not
/// null, fills in their arguments. `out_json` receives a JSON array of
/// `{"trigger": {"start", "end"}, "type", "args"}` objects; spans are
/// inclusive token indices.
///
/// # Safety
/// `det` must be a live handle, `args` a live handle or null, `tokens` an
/// array of `n` NUL-terminated strings and `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn contee_predict(
    det: *const ConteeDetector,
    args: *const ConteeArguments,
    tokens: *const *const c_char,
    n: usize,
    out_json: *mut *mut c_char,
) -> ConteeStatus {
    guard(|| {
        let det = borrow(det, "detector")?;
        let sentence = TokenizedSentence {
            sentence_id: String::new(),
            tokens: read_tokens(tokens, n)?,
            events: Vec::new(),
            entities: Vec::new(),
        };
        let mut events = det.0.predict(&sentence)?.events;
        if let Some(a) = args.as_ref() {
            events = a.0.extract_arguments(&sentence.tokens, &events)?;
        }
        put_string(out_json, serde_json::to_string(&events)?)
    })
}

/// Scores a JSON-lines predictions file against a gold corpus. `out_json`
/// receives `{"detection": {...}, "arguments": {...}}` with precision,
/// recall, F1 and counts.
///
/// # Safety
/// Both paths must be NUL-terminated strings and `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn contee_evaluate(
    predictions_path: *const c_char,
    gold_path: *const c_char,
    out_json: *mut *mut c_char,
) -> ConteeStatus {
    guard(|| {
        let preds: Vec<PredictedSentence> = load_predictions(&PathBuf::from(read_str(predictions_path, "predictions path")?))?;
        let (_, gold) = load_corpus(&PathBuf::from(read_str(gold_path, "gold path")?), None)?;
        let report = serde_json::json!({
            "detection": detection_f1(&preds, &gold)?,
            "arguments": argument_f1(&preds, &gold)?,
        });
        put_string(out_json, report.to_string())
    })
}
