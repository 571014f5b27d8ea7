//! C ABI over `dialect-frontend`.
//!
//! Every function returns a [`DfStatus`]. On failure a message describing
//! the last error of the calling thread is available from
//! [`df_last_error_message`]. Strings returned through out-parameters are
//! owned by the caller and released with [`df_string_free`]; models with
//! [`df_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use dialect_frontend::eval::{bleu, bleu_units};
use dialect_frontend::guard::PatternSet;
use dialect_frontend::model::checkpoint::{load_checkpoint, save_checkpoint};
use dialect_frontend::model::{Model, ModelKind};
use dialect_frontend::pipeline::{tsv_row, Pipeline, StageContext};
use dialect_frontend::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Checkpoint = 4,
    Config = 5,
    Dimension = 6,
    EmptyInput = 7,
    Pattern = 8,
    Pipeline = 9,
    Numerical = 10,
    Parse = 11,
    Panic = 12,
}

/// Model kind reported by [`df_model_kind`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DfModelKind {
    NonAutoregressive = 0,
    Autoregressive = 1,
}

/// Opaque translation model handle.
pub struct DfModel {
    model: Arc<Model>,
    patterns: PatternSet,
}

/// Opaque pattern set handle.
pub struct DfPatterns {
    patterns: PatternSet,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> DfStatus {
    match e {
        Error::Io(_) => DfStatus::Io,
        Error::Checkpoint(_) => DfStatus::Checkpoint,
        Error::Config(_) => DfStatus::Config,
        Error::Dimension(_) => DfStatus::Dimension,
        Error::EmptyInput(_) => DfStatus::EmptyInput,
        Error::Pattern { .. } => DfStatus::Pattern,
        Error::Pipeline { .. } => DfStatus::Pipeline,
        Error::Parse { .. } => DfStatus::Parse,
        Error::Degenerate(_) | Error::Instability(_) | Error::Diverged { .. } => DfStatus::Numerical,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guarded(f: impl FnOnce() -> Result<(), (DfStatus, String)>) -> DfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DfStatus::Ok
        }
        Ok(Err((s, msg))) => {
            set_error(&msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            DfStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (DfStatus, String) {
    (status_of(&e), format!("{}: {e}", e.category()))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, (DfStatus, String)> {
    if p.is_null() {
        return Err((DfStatus::NullArgument, format!("`{name}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (DfStatus::InvalidUtf8, format!("`{name}` is not valid UTF-8")))
}

fn null_err(name: &str) -> (DfStatus, String) {
    (DfStatus::NullArgument, format!("`{name}` is null"))
}

fn into_c(s: String) -> *mut c_char {
    CString::new(s.replace('\0', "")).unwrap_or_default().into_raw()
}

/// Message for the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn df_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn df_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint. On success `*out` receives a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn df_model_load(path: *const c_char, out: *mut *mut DfModel) -> DfStatus {
    guarded(|| {
        if out.is_null() {
            return Err(null_err("out"));
        }
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let model = load_checkpoint(path).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(DfModel {
            model: Arc::new(model),
            patterns: PatternSet::default(),
        }));
        Ok(())
    })
}

/// Writes the model to a checkpoint file.
///
/// # Safety
/// `model` must come from [`df_model_load`]; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn df_model_save(model: *const DfModel, path: *const c_char) -> DfStatus {
    guarded(|| {
        let m = model.as_ref().ok_or_else(|| null_err("model"))?;
        let path = str_arg(path, "path")?;
        save_checkpoint(&m.model, path).map_err(lib_err)
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`df_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn df_model_free(model: *mut DfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn df_model_kind(model: *const DfModel, out: *mut DfModelKind) -> DfStatus {
    guarded(|| {
        let m = model.as_ref().ok_or_else(|| null_err("model"))?;
        let out = out.as_mut().ok_or_else(|| null_err("out"))?;
        *out = match m.model.config.kind {
            ModelKind::Nat => DfModelKind::NonAutoregressive,
            ModelKind::At => DfModelKind::Autoregressive,
        };
        Ok(())
    })
}

/// Compiles guard patterns, one regular expression per line.
///
/// # Safety
/// `patterns` must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn df_patterns_new(patterns: *const c_char, out: *mut *mut DfPatterns) -> DfStatus {
    guarded(|| {
        if out.is_null() {
            return Err(null_err("out"));
        }
        *out = ptr::null_mut();
        let text = str_arg(patterns, "patterns")?;
        let set = PatternSet::new(text.lines().filter(|l| !l.trim().is_empty())).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(DfPatterns { patterns: set }));
        Ok(())
    })
}

/// # Safety
/// `patterns` must come from [`df_patterns_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn df_patterns_free(patterns: *mut DfPatterns) {
    if !patterns.is_null() {
        drop(Box::from_raw(patterns));
    }
}

/// Replaces the guard patterns a model uses. The model keeps its own copy.
///
/// # Safety
/// Both handles must be valid.
#[no_mangle]
pub unsafe extern "C" fn df_model_set_patterns(model: *mut DfModel, patterns: *const DfPatterns) -> DfStatus {
    guarded(|| {
        let m = model.as_mut().ok_or_else(|| null_err("model"))?;
        let p = patterns.as_ref().ok_or_else(|| null_err("patterns"))?;
        m.patterns = p.patterns.clone();
        Ok(())
    })
}

/// Translates one sentence. `*out` receives a string to release with
/// [`df_string_free`].
///
/// # Safety
/// `model` must be valid, `text` NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn df_translate(model: *const DfModel, text: *const c_char, out: *mut *mut c_char) -> DfStatus {
    guarded(|| {
        if out.is_null() {
            return Err(null_err("out"));
        }
        *out = ptr::null_mut();
        let m = model.as_ref().ok_or_else(|| null_err("model"))?;
        let text = str_arg(text, "text")?;
        let r = m.model.translate(text, &m.patterns).map_err(lib_err)?;
        *out = into_c(r.text);
        Ok(())
    })
}

/// Runs the default frontend pipeline and returns the tab-separated row
/// `input, translation, phonemes`. `model` may be null, in which case
/// translation is the identity.
///
/// # Safety
/// `model` must be null or valid, `text` NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn df_pipeline_run(
    model: *const DfModel,
    text: *const c_char,
    out: *mut *mut c_char,
) -> DfStatus {
    guarded(|| {
        if out.is_null() {
            return Err(null_err("out"));
        }
        *out = ptr::null_mut();
        let text = str_arg(text, "text")?;
        let ctx = match model.as_ref() {
            Some(m) => StageContext {
                model: Some(m.model.clone()),
                patterns: m.patterns.clone(),
                lexicon: m.model.lexicon.clone(),
            },
            None => StageContext::default(),
        };
        let p = Pipeline::default_with(&ctx).map_err(lib_err)?;
        let doc = p.run(text).map_err(lib_err)?;
        *out = into_c(tsv_row(&doc));
        Ok(())
    })
}

/// Strict corpus character BLEU (max order 4) of `n` candidate lines
/// against `n` reference lines.
///
/// # Safety
/// `candidates` and `references` must each point to `n` NUL-terminated
/// strings; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn df_char_bleu(
    candidates: *const *const c_char,
    references: *const *const c_char,
    n: usize,
    out: *mut f64,
) -> DfStatus {
    guarded(|| {
        let out = out.as_mut().ok_or_else(|| null_err("out"))?;
        if n > 0 && (candidates.is_null() || references.is_null()) {
            return Err(null_err("candidates/references"));
        }
        let mut c = Vec::with_capacity(n);
        let mut r = Vec::with_capacity(n);
        for i in 0..n {
            c.push(bleu_units(str_arg(*candidates.add(i), "candidate")?, None));
            r.push(bleu_units(str_arg(*references.add(i), "reference")?, None));
        }
        *out = bleu(&c, &r, 4).map_err(lib_err)?.bleu;
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn df_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
