//! C ABI over the training engine.
//!
//! Every function returns an [`EpStatus`]; on failure the message is
//! available from [`ep_last_error`] until the next call on the same thread.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use episodic_prompt::config::RunConfig;
use episodic_prompt::episodic::{StepRecord, Task};
use episodic_prompt::eval::{harmonic_mean, Experiment};
use episodic_prompt::prompt_bank::PromptBank;
use episodic_prompt::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidString = 2,
    Config = 3,
    Data = 4,
    Io = 5,
    Numeric = 6,
    Internal = 7,
    Panic = 8,
    /// The session has no trained or loaded prompts yet.
    NotTrained = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpTask {
    BaseToNew = 0,
    DomainGeneralization = 1,
}

/// Accuracies in percent; fields that do not apply to the task are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpMetrics {
    pub base_acc: f64,
    pub new_acc: f64,
    pub harmonic_mean: f64,
    pub target_acc: f64,
    pub train_acc: f64,
    pub steps: u64,
}

/// Opaque run configuration.
pub struct EpConfig {
    inner: RunConfig,
}

/// Opaque session: generated data, frozen encoders and the prompt bank.
pub struct EpSession {
    experiment: Experiment,
    bank: Option<PromptBank>,
    trace: Vec<StepRecord>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> EpStatus {
    match e {
        Error::Config(_) => EpStatus::Config,
        Error::Data(_) | Error::Input(_) | Error::Leakage(_) | Error::Format(_) => EpStatus::Data,
        Error::Io(_) => EpStatus::Io,
        Error::Numeric(_) => EpStatus::Numeric,
        Error::Dimension { .. } | Error::Index { .. } => EpStatus::Internal,
    }
}

struct Failure(EpStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EpStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EpStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            EpStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(EpStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `p` is null or points to a valid, NUL-terminated string.
unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(EpStatus::InvalidString, format!("{what} is not valid UTF-8")))
}

/// # Safety
/// `p` is null or a live handle from this library.
unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

/// # Safety
/// `p` is null or a live handle from this library, not aliased.
unsafe fn deref_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Last error message on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn ep_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// `2ab / (a + b)`, or 0 when both are 0.
#[no_mangle]
pub extern "C" fn ep_harmonic_mean(a: f64, b: f64) -> f64 {
    harmonic_mean(a, b)
}

/// Default configuration for `task`.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ep_config_default(task: EpTask, out: *mut *mut EpConfig) -> EpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let task = match task {
            EpTask::BaseToNew => Task::BaseToNew,
            EpTask::DomainGeneralization => Task::DomainGeneralization,
        };
        *out = Box::into_raw(Box::new(EpConfig {
            inner: RunConfig::for_task(task),
        }));
        Ok(())
    })
}

/// Parses a TOML configuration.
///
/// # Safety
/// `toml` is a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ep_config_parse(toml: *const c_char, out: *mut *mut EpConfig) -> EpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = read_str(toml, "toml")?;
        let inner = RunConfig::parse(text)?;
        inner.clone().resolve()?;
        *out = Box::into_raw(Box::new(EpConfig { inner }));
        Ok(())
    })
}

/// # Safety
/// `config` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn ep_config_set_seed(config: *mut EpConfig, seed: u64) -> EpStatus {
    guard(|| {
        deref_mut(config, "config")?.inner.seed = seed;
        Ok(())
    })
}

/// Run id of the resolved configuration, written as 16 hex digits plus NUL
/// into `buf` (at least 17 bytes).
///
/// # Safety
/// `config` is a live handle; `buf` is valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn ep_config_run_id(config: *const EpConfig, buf: *mut c_char, len: usize) -> EpStatus {
    guard(|| {
        let cfg = deref(config, "config")?.inner.clone().resolve()?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let id = CString::new(cfg.run_id()).expect("hex digits");
        let bytes = id.as_bytes_with_nul();
        if bytes.len() > len {
            return Err(Failure(
                EpStatus::Data,
                format!("buffer of {len} bytes, need {}", bytes.len()),
            ));
        }
        ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, bytes.len());
        Ok(())
    })
}

/// # Safety
/// `config` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ep_config_free(config: *mut EpConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Generates data and builds the frozen encoders. The config is copied.
///
/// # Safety
/// `config` is a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ep_session_new(config: *const EpConfig, out: *mut *mut EpSession) -> EpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = &deref(config, "config")?.inner;
        let experiment = Experiment::build(cfg)?;
        *out = Box::into_raw(Box::new(EpSession {
            experiment,
            bank: None,
            trace: Vec::new(),
        }));
        Ok(())
    })
}

/// Trains from freshly initialized prompts, replacing any previous bank.
///
/// # Safety
/// `session` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn ep_session_train(session: *mut EpSession) -> EpStatus {
    guard(|| {
        let s = deref_mut(session, "session")?;
        let mut bank = s.experiment.init_bank()?;
        s.trace = s.experiment.train(&mut bank)?;
        s.bank = Some(bank);
        Ok(())
    })
}

/// # Safety
/// `session` is a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ep_session_evaluate(session: *const EpSession, out: *mut EpMetrics) -> EpStatus {
    guard(|| {
        let s = deref(session, "session")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let bank = s
            .bank
            .as_ref()
            .ok_or_else(|| Failure(EpStatus::NotTrained, "train or load prompts first".into()))?;
        let m = s.experiment.evaluate(bank, Vec::new())?;
        *out = EpMetrics {
            base_acc: m.base_acc.unwrap_or(f64::NAN),
            new_acc: m.new_acc.unwrap_or(f64::NAN),
            harmonic_mean: m.harmonic_mean.unwrap_or(f64::NAN),
            target_acc: m
                .per_domain_acc
                .get(&s.experiment.config.target_domain())
                .copied()
                .unwrap_or(f64::NAN),
            train_acc: m.train_acc,
            steps: s.trace.len() as u64,
        };
        Ok(())
    })
}

/// Writes the prompt bank checkpoint to `path`.
///
/// # Safety
/// `session` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ep_session_save(session: *const EpSession, path: *const c_char) -> EpStatus {
    guard(|| {
        let s = deref(session, "session")?;
        let path = read_str(path, "path")?;
        let bank = s
            .bank
            .as_ref()
            .ok_or_else(|| Failure(EpStatus::NotTrained, "nothing to save".into()))?;
        bank.save(Path::new(path))?;
        Ok(())
    })
}

/// Loads a checkpoint; its prompt shape must match the session's config.
///
/// # Safety
/// `session` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ep_session_load(session: *mut EpSession, path: *const c_char) -> EpStatus {
    guard(|| {
        let s = deref_mut(session, "session")?;
        let path = read_str(path, "path")?;
        let bank = PromptBank::load(Path::new(path))?;
        let cfg = &s.experiment.config;
        let want = (
            cfg.prompt_len(),
            cfg.prompt_layers(),
            cfg.encoder.text_width,
            cfg.encoder.image_width,
        );
        let got = (bank.prompt_len(), bank.prompt_layers(), bank.d_text(), bank.d_img());
        if got != want {
            return Err(Failure(
                EpStatus::Config,
                format!("checkpoint prompt shape {got:?} does not match the config {want:?}"),
            ));
        }
        s.bank = Some(bank);
        s.trace.clear();
        Ok(())
    })
}

/// # Safety
/// `session` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ep_session_free(session: *mut EpSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}
