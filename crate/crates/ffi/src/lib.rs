//! C interface. Every function returns an [`FspStatus`]; on failure the
//! message is available from [`fsp_last_error`] on the same thread.
//! Strings handed out by the library are released with [`fsp_string_free`].

use fewshot_persona::checkpoint::Checkpoint;
use fewshot_persona::corpus::{Corpus, Split};
use fewshot_persona::error::Error;
use fewshot_persona::harness::{self, RunConfig};
use fewshot_persona::meta::MetaState;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FspStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Incompatible = 6,
    Numeric = 7,
    Data = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FspSplit {
    Train = 0,
    Valid = 1,
    Test = 2,
}

/// A loaded or generated conversation corpus.
pub struct FspCorpus {
    corpus: Corpus,
    hash: String,
}

/// Trained parameters plus the configuration that produced them.
pub struct FspModel {
    state: MetaState,
    config: RunConfig,
    dataset_hash: String,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(FspStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match root(&e) {
            Error::Config(_) => FspStatus::Config,
            Error::Io(_) => FspStatus::Io,
            Error::Json(_) | Error::Format { .. } => FspStatus::Format,
            Error::Incompatible { .. } => FspStatus::Incompatible,
            Error::Numeric(_) => FspStatus::Numeric,
            _ => FspStatus::Data,
        };
        Failure(code, e.to_string())
    }
}

fn root(e: &Error) -> &Error {
    match e {
        Error::Speaker { source, .. } => root(source),
        other => other,
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(FspStatus::Format, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FspStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FspStatus::Ok
        }
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            FspStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(FspStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(FspStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, what).map(Some)
    }
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(FspStatus::NullPointer, format!("{what} is null")))
}

fn out_ptr<T>(p: *mut T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(FspStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| Failure(FspStatus::Format, "string holds a nul byte".into()))?;
    *out = c.into_raw();
    Ok(())
}

fn parse_config(json: Option<&str>) -> Result<RunConfig, Failure> {
    let cfg: RunConfig = match json {
        Some(j) => serde_json::from_str(j)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Message of the last failed call on this thread, or null. Owned by the
/// library and valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn fsp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn fsp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn fsp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Generates the synthetic corpus described by a JSON run configuration
/// (null for the defaults).
///
/// # Safety
/// `config_json` must be null or a nul-terminated string; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn fsp_corpus_generate(config_json: *const c_char, out: *mut *mut FspCorpus) -> FspStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let cfg = parse_config(opt_str_arg(config_json, "config_json")?)?;
        let corpus = cfg.data.generate(cfg.data_seed)?.corpus;
        let hash = corpus.content_hash()?;
        *out = Box::into_raw(Box::new(FspCorpus { corpus, hash }));
        Ok(())
    })
}

/// # Safety
/// `dir` must be a nul-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fsp_corpus_load(dir: *const c_char, out: *mut *mut FspCorpus) -> FspStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        let corpus = Corpus::load(&dir)?;
        let hash = corpus.content_hash()?;
        *out = Box::into_raw(Box::new(FspCorpus { corpus, hash }));
        Ok(())
    })
}

/// # Safety
/// `corpus` must be a live handle and `dir` a nul-terminated path.
#[no_mangle]
pub unsafe extern "C" fn fsp_corpus_save(corpus: *const FspCorpus, dir: *const c_char) -> FspStatus {
    guard(|| {
        let c = handle(corpus, "corpus")?;
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        c.corpus.save(&dir)?;
        Ok(())
    })
}

/// Content hash of the corpus as a hex string.
///
/// # Safety
/// `corpus` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fsp_corpus_hash(corpus: *const FspCorpus, out: *mut *mut c_char) -> FspStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let c = handle(corpus, "corpus")?;
        write_string(out, c.hash.clone())
    })
}

/// # Safety
/// `corpus` must come from this library or be null, and is not used again.
#[no_mangle]
pub unsafe extern "C" fn fsp_corpus_free(corpus: *mut FspCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Meta-trains a model on the corpus with a JSON run configuration (null
/// for the defaults).
///
/// # Safety
/// `corpus` must be a live handle, `config_json` null or nul-terminated,
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fsp_train(
    corpus: *const FspCorpus,
    config_json: *const c_char,
    out: *mut *mut FspModel,
) -> FspStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let c = handle(corpus, "corpus")?;
        let config = parse_config(opt_str_arg(config_json, "config_json")?)?;
        let (state, _) = harness::train(&c.corpus, &config, &mut |_, _| Ok(()))?;
        *out = Box::into_raw(Box::new(FspModel {
            state,
            config,
            dataset_hash: c.hash.clone(),
        }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a nul-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fsp_model_load(path: *const c_char, out: *mut *mut FspModel) -> FspStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        let ck = Checkpoint::load(&path)?;
        let config: RunConfig = serde_json::from_value(ck.config.clone())?;
        let state = ck.to_state()?;
        *out = Box::into_raw(Box::new(FspModel {
            state,
            config,
            dataset_hash: ck.dataset_hash,
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `path` a nul-terminated path.
#[no_mangle]
pub unsafe extern "C" fn fsp_model_save(model: *const FspModel, path: *const c_char) -> FspStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        harness::checkpoint(&m.state, &m.config, &m.dataset_hash).save(&path)?;
        Ok(())
    })
}

/// SHA-256 over all learned parameters, as hex.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fsp_model_checksum(model: *const FspModel, out: *mut *mut c_char) -> FspStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let m = handle(model, "model")?;
        write_string(out, m.state.checksum())
    })
}

/// # Safety
/// `model` must come from this library or be null, and is not used again.
#[no_mangle]
pub unsafe extern "C" fn fsp_model_free(model: *mut FspModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Adapts to every speaker of `split` and writes the evaluation as JSON.
/// Refuses a corpus other than the one the model was trained on.
///
/// # Safety
/// Both handles must be live; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fsp_evaluate(
    model: *const FspModel,
    corpus: *const FspCorpus,
    split: FspSplit,
    out_json: *mut *mut c_char,
) -> FspStatus {
    guard(|| {
        out_ptr(out_json, "out_json")?;
        let m = handle(model, "model")?;
        let c = handle(corpus, "corpus")?;
        if m.dataset_hash != c.hash {
            return Err(Error::Incompatible {
                field: "dataset hash".into(),
                expected: m.dataset_hash.clone(),
                found: c.hash.clone(),
            }
            .into());
        }
        let split = match split {
            FspSplit::Train => Split::Train,
            FspSplit::Valid => Split::Valid,
            FspSplit::Test => Split::Test,
        };
        let ev = harness::evaluate(&m.state, &c.corpus, &m.config, split)?;
        write_string(out_json, serde_json::to_string(&ev)?)
    })
}
