//! C interface to the hybridrag pipeline and answer metrics.
//!
//! Every fallible function returns an [`HrStatus`]. On failure a message is
//! kept per thread and can be read with [`hr_last_error`]. Strings returned
//! through out-parameters are owned by the caller and must be released with
//! [`hr_string_free`]; pipelines with [`hr_pipeline_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use hybridrag::config::{ConfigError, Settings};
use hybridrag::evalkit::{bleu1, rouge1};
use hybridrag::ingest::{IngestError, Stores};
use hybridrag::{Pipeline, RawQuery};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HrStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Config file or setting could not be used.
    Config = 3,
    /// A file could not be read or written.
    Io = 4,
    /// A pipeline stage or ingestion step failed.
    Pipeline = 5,
    /// Argument value out of range.
    InvalidArgument = 6,
    /// The library panicked; the handle should be considered unusable.
    Panic = 7,
}

/// Opaque pipeline handle.
pub struct HrPipeline {
    pipeline: Pipeline,
    settings: Settings,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

type Failure = (HrStatus, String);

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> HrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            HrStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            HrStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err((HrStatus::NullArgument, format!("{name} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (HrStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

fn config_failure(e: ConfigError) -> Failure {
    let status = match e {
        ConfigError::Io { .. } => HrStatus::Io,
        ConfigError::Pipeline(_) => HrStatus::Pipeline,
        _ => HrStatus::Config,
    };
    (status, e.to_string())
}

fn ingest_failure(e: IngestError) -> Failure {
    let status = match e {
        IngestError::Io { .. } => HrStatus::Io,
        IngestError::InvalidConfig { .. } => HrStatus::Config,
        _ => HrStatus::Pipeline,
    };
    (status, e.to_string())
}

fn into_c(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).unwrap_or_default().into_raw()
}

unsafe fn handle<'a>(p: *mut HrPipeline) -> Result<&'a mut HrPipeline, Failure> {
    p.as_mut()
        .ok_or_else(|| (HrStatus::NullArgument, "pipeline is NULL".to_string()))
}

/// Message for the last failed call on this thread, or "" after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn hr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Open a pipeline. `config_path` (key = value file) and `store_dir` may be
/// NULL; without a store the pipeline starts empty.
///
/// # Safety
/// String arguments must be NULL or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hr_pipeline_open(
    config_path: *const c_char,
    store_dir: *const c_char,
    out: *mut *mut HrPipeline,
) -> HrStatus {
    guard(|| {
        if out.is_null() {
            return Err((HrStatus::NullArgument, "out is NULL".into()));
        }
        *out = ptr::null_mut();
        let config = opt_str_arg(config_path, "config_path")?.map(PathBuf::from);
        let settings = Settings::resolve(config.as_deref(), &[]).map_err(config_failure)?;
        let stores = match opt_str_arg(store_dir, "store_dir")? {
            Some(d) => Stores::load(d.as_ref()).map_err(ingest_failure)?,
            None => Stores::new(settings.embed_dim),
        };
        let pipeline = settings.build_pipeline(stores).map_err(config_failure)?;
        *out = Box::into_raw(Box::new(HrPipeline { pipeline, settings }));
        Ok(())
    })
}

/// Ingest a JSONL corpus (`{doc_id, title, text}` per line) into the
/// pipeline's stores. If `out_report_json` is not NULL it receives the
/// ingestion report as JSON.
///
/// # Safety
/// `p` must come from `hr_pipeline_open`; `corpus_path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn hr_pipeline_ingest(
    p: *mut HrPipeline,
    corpus_path: *const c_char,
    out_report_json: *mut *mut c_char,
) -> HrStatus {
    guard(|| {
        let h = handle(p)?;
        let path = str_arg(corpus_path, "corpus_path")?;
        let chunking = h.settings.chunking();
        let aliases = &h.pipeline.augmenter.aliases;
        let gateway = h.pipeline.gateway.as_ref();
        let report = h
            .pipeline
            .stores
            .update(|s| s.ingest_corpus(path.as_ref(), chunking, aliases, gateway))
            .map_err(ingest_failure)?;
        if !out_report_json.is_null() {
            *out_report_json = into_c(serde_json::to_string(&report).expect("report serializes"));
        }
        Ok(())
    })
}

/// Persist the pipeline's stores into `dir`.
///
/// # Safety
/// `p` must come from `hr_pipeline_open`; `dir` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn hr_pipeline_save(p: *mut HrPipeline, dir: *const c_char) -> HrStatus {
    guard(|| {
        let h = handle(p)?;
        let dir = str_arg(dir, "dir")?;
        h.pipeline.stores.snapshot().save(dir.as_ref()).map_err(ingest_failure)
    })
}

unsafe fn ask(p: *mut HrPipeline, question: *const c_char) -> Result<hybridrag::Answer, Failure> {
    let h = handle(p)?;
    let q = str_arg(question, "question")?;
    let rq = RawQuery::new("ffi", q).map_err(|e| (HrStatus::InvalidArgument, e.to_string()))?;
    h.pipeline
        .answer(&rq)
        .map_err(|e| (HrStatus::Pipeline, e.to_string()))
}

/// Answer a question; `out_text` receives the answer text.
///
/// # Safety
/// `p` must come from `hr_pipeline_open`; `question` NUL-terminated;
/// `out_text` writable.
#[no_mangle]
pub unsafe extern "C" fn hr_pipeline_ask(
    p: *mut HrPipeline,
    question: *const c_char,
    out_text: *mut *mut c_char,
) -> HrStatus {
    guard(|| {
        if out_text.is_null() {
            return Err((HrStatus::NullArgument, "out_text is NULL".into()));
        }
        *out_text = ptr::null_mut();
        let a = ask(p, question)?;
        *out_text = into_c(a.text);
        Ok(())
    })
}

/// Answer a question; `out_json` receives the full answer (text, augmented
/// query, route, context, trace) as JSON.
///
/// # Safety
/// Same as `hr_pipeline_ask`.
#[no_mangle]
pub unsafe extern "C" fn hr_pipeline_ask_json(
    p: *mut HrPipeline,
    question: *const c_char,
    out_json: *mut *mut c_char,
) -> HrStatus {
    guard(|| {
        if out_json.is_null() {
            return Err((HrStatus::NullArgument, "out_json is NULL".into()));
        }
        *out_json = ptr::null_mut();
        let a = ask(p, question)?;
        *out_json = into_c(serde_json::to_string(&a).expect("answer serializes"));
        Ok(())
    })
}

/// Release a pipeline. NULL is ignored.
///
/// # Safety
/// `p` must be NULL or come from `hr_pipeline_open` and not be used again.
#[no_mangle]
pub unsafe extern "C" fn hr_pipeline_free(p: *mut HrPipeline) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Release a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must be NULL or a string returned through an out-parameter of this
/// library, not freed before.
#[no_mangle]
pub unsafe extern "C" fn hr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

unsafe fn metric(
    f: fn(&str, &[&str]) -> f64,
    candidate: *const c_char,
    references: *const *const c_char,
    n_references: usize,
    out: *mut f64,
) -> HrStatus {
    guard(|| {
        if out.is_null() || (references.is_null() && n_references > 0) {
            return Err((HrStatus::NullArgument, "out or references is NULL".into()));
        }
        if n_references == 0 {
            return Err((HrStatus::InvalidArgument, "at least one reference is required".into()));
        }
        let cand = str_arg(candidate, "candidate")?;
        let refs = std::slice::from_raw_parts(references, n_references)
            .iter()
            .map(|&r| str_arg(r, "reference"))
            .collect::<Result<Vec<&str>, _>>()?;
        *out = f(cand, &refs);
        Ok(())
    })
}

/// BLEU-1 of `candidate` against `n_references` reference strings.
///
/// # Safety
/// `candidate` NUL-terminated; `references` points to `n_references`
/// NUL-terminated strings; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hr_bleu1(
    candidate: *const c_char,
    references: *const *const c_char,
    n_references: usize,
    out: *mut f64,
) -> HrStatus {
    metric(bleu1, candidate, references, n_references, out)
}

/// ROUGE-1 recall of `candidate`, best over the references.
///
/// # Safety
/// Same as `hr_bleu1`.
#[no_mangle]
pub unsafe extern "C" fn hr_rouge1(
    candidate: *const c_char,
    references: *const *const c_char,
    n_references: usize,
    out: *mut f64,
) -> HrStatus {
    metric(rouge1, candidate, references, n_references, out)
}
