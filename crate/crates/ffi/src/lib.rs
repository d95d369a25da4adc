//! C ABI over the report generator: opaque model handles, integer error
//! codes, and caller-freed strings. The matching header lives in
//! `include/remrg.h` and is kept in sync by a test.
//!
//! Conventions:
//! - Functions return `REMRG_OK` (0) or a nonzero error code; the
//!   per-thread message behind `remrg_last_error` describes the failure.
//! - Strings returned through out-parameters are heap-allocated and must be
//!   released with `remrg_string_free`.
//! - A `RemrgModel` is confined to one thread at a time; concurrent reads
//!   of separate handles are fine.

use std::cell::RefCell;
use std::ffi::{c_char, c_double, c_int, CStr, CString};
use std::path::Path;
use std::ptr;

use remrg_core::checkpoint::load_checkpoint;
use remrg_core::corpus::{load_features, FeatureSet, Vocabulary};
use remrg_core::decoding::{generate, DecodeConfig, DecodeMode};
use remrg_core::model::ModelParams;
use remrg_core::verify::run_gradcheck;

pub const REMRG_OK: c_int = 0;
pub const REMRG_ERR_USAGE: c_int = 1;
pub const REMRG_ERR_DATA: c_int = 2;
pub const REMRG_ERR_VERIFY: c_int = 3;

pub const REMRG_MODE_GREEDY: c_int = 0;
pub const REMRG_MODE_BEAM: c_int = 1;
pub const REMRG_MODE_SAMPLE: c_int = 2;

/// Opaque handle: a loaded checkpoint plus its vocabulary.
pub struct RemrgModel {
    params: ModelParams,
    vocab: Vocabulary,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap();
    });
}

/// Message of the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn remrg_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn remrg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

unsafe fn cstr_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, c_int> {
    if ptr.is_null() {
        set_error(&format!("{} is null", name));
        return Err(REMRG_ERR_USAGE);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(&format!("{} is not valid UTF-8", name));
        REMRG_ERR_USAGE
    })
}

/// Load a checkpoint and its vocabulary file into a fresh handle.
///
/// # Safety
/// `ckpt_path` and `vocab_path` must point to NUL-terminated strings, and
/// `out_model` to writable pointer storage. The returned handle must be
/// released with `remrg_model_free`.
#[no_mangle]
pub unsafe extern "C" fn remrg_model_load(
    ckpt_path: *const c_char,
    vocab_path: *const c_char,
    out_model: *mut *mut RemrgModel,
) -> c_int {
    if out_model.is_null() {
        set_error("out_model is null");
        return REMRG_ERR_USAGE;
    }
    *out_model = ptr::null_mut();
    let ckpt = match cstr_arg(ckpt_path, "ckpt_path") {
        Ok(s) => s,
        Err(code) => return code,
    };
    let vocab_path = match cstr_arg(vocab_path, "vocab_path") {
        Ok(s) => s,
        Err(code) => return code,
    };
    let params = match load_checkpoint(Path::new(ckpt)) {
        Ok(p) => p,
        Err(e) => {
            set_error(&e.to_string());
            return REMRG_ERR_DATA;
        }
    };
    let vocab = match Vocabulary::load(Path::new(vocab_path)) {
        Ok(v) => v,
        Err(e) => {
            set_error(&e.to_string());
            return REMRG_ERR_DATA;
        }
    };
    if vocab.size() != params.config.vocab_size {
        set_error(&format!(
            "vocabulary size {} does not match the checkpoint's {}",
            vocab.size(),
            params.config.vocab_size
        ));
        return REMRG_ERR_DATA;
    }
    *out_model = Box::into_raw(Box::new(RemrgModel { params, vocab }));
    REMRG_OK
}

/// Release a handle returned by `remrg_model_load`. Null is a no-op.
///
/// # Safety
/// `model` must be a pointer returned by `remrg_model_load` that has not
/// been freed already.
#[no_mangle]
pub unsafe extern "C" fn remrg_model_free(model: *mut RemrgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size of a loaded model; 0 for a null handle.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn remrg_model_vocab_size(model: *const RemrgModel) -> usize {
    model.as_ref().map(|m| m.vocab.size()).unwrap_or(0)
}

/// Total scalar parameter count; 0 for a null handle.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn remrg_model_param_count(model: *const RemrgModel) -> usize {
    model.as_ref().map(|m| m.params.param_count()).unwrap_or(0)
}

fn decode_mode(mode: c_int) -> Result<DecodeMode, c_int> {
    match mode {
        REMRG_MODE_GREEDY => Ok(DecodeMode::Greedy),
        REMRG_MODE_BEAM => Ok(DecodeMode::Beam),
        REMRG_MODE_SAMPLE => Ok(DecodeMode::Sample),
        other => {
            set_error(&format!("unknown decode mode {}", other));
            Err(REMRG_ERR_USAGE)
        }
    }
}

fn run_decode(
    model: &RemrgModel,
    features: &FeatureSet,
    mode: c_int,
    beam: usize,
    alpha: c_double,
    max_len: usize,
    seed: u64,
    out_text: *mut *mut c_char,
) -> c_int {
    let cfg = DecodeConfig {
        mode: match decode_mode(mode) {
            Ok(m) => m,
            Err(code) => return code,
        },
        beam_size: beam,
        max_len: if max_len == 0 {
            model.params.config.max_len
        } else {
            max_len
        },
        alpha,
        seed,
    };
    let ids = match generate(&model.params, features, &cfg) {
        Ok(ids) => ids,
        Err(e) => {
            set_error(&e.to_string());
            return REMRG_ERR_DATA;
        }
    };
    let text = match model.vocab.detokenize(&ids) {
        Ok(t) => t,
        Err(e) => {
            set_error(&e.to_string());
            return REMRG_ERR_DATA;
        }
    };
    let c = CString::new(text.replace('\0', " ")).unwrap();
    unsafe {
        *out_text = c.into_raw();
    }
    REMRG_OK
}

/// Decode a feature file into report text. `max_len` 0 means the model's
/// configured maximum.
///
/// # Safety
/// `model` must be a live handle, `features_path` a NUL-terminated string,
/// and `out_text` writable; the returned string must be released with
/// `remrg_string_free`.
#[no_mangle]
pub unsafe extern "C" fn remrg_generate_file(
    model: *const RemrgModel,
    features_path: *const c_char,
    mode: c_int,
    beam: usize,
    alpha: c_double,
    max_len: usize,
    seed: u64,
    out_text: *mut *mut c_char,
) -> c_int {
    let model = match model.as_ref() {
        Some(m) => m,
        None => {
            set_error("model is null");
            return REMRG_ERR_USAGE;
        }
    };
    if out_text.is_null() {
        set_error("out_text is null");
        return REMRG_ERR_USAGE;
    }
    *out_text = ptr::null_mut();
    let path = match cstr_arg(features_path, "features_path") {
        Ok(s) => s,
        Err(code) => return code,
    };
    let features = match load_features(Path::new(path)) {
        Ok(f) => f,
        Err(e) => {
            set_error(&e.to_string());
            return REMRG_ERR_DATA;
        }
    };
    run_decode(model, &features, mode, beam, alpha, max_len, seed, out_text)
}

/// Decode an in-memory row-major `n_regions x dim` feature matrix.
///
/// # Safety
/// `features` must point to `n_regions * dim` doubles; other requirements
/// match `remrg_generate_file`.
#[no_mangle]
pub unsafe extern "C" fn remrg_generate_buffer(
    model: *const RemrgModel,
    features: *const c_double,
    n_regions: usize,
    dim: usize,
    mode: c_int,
    beam: usize,
    alpha: c_double,
    max_len: usize,
    seed: u64,
    out_text: *mut *mut c_char,
) -> c_int {
    let model = match model.as_ref() {
        Some(m) => m,
        None => {
            set_error("model is null");
            return REMRG_ERR_USAGE;
        }
    };
    if out_text.is_null() {
        set_error("out_text is null");
        return REMRG_ERR_USAGE;
    }
    *out_text = ptr::null_mut();
    if features.is_null() || n_regions == 0 || dim == 0 {
        set_error("features buffer is null or empty");
        return REMRG_ERR_USAGE;
    }
    let values = std::slice::from_raw_parts(features, n_regions * dim).to_vec();
    if values.iter().any(|v| !v.is_finite()) {
        set_error("features contain a non-finite value");
        return REMRG_ERR_DATA;
    }
    let features = FeatureSet::new("buffer", n_regions, dim, values);
    run_decode(model, &features, mode, beam, alpha, max_len, seed, out_text)
}

/// Release a string returned by a generate call. Null is a no-op.
///
/// # Safety
/// `s` must be a pointer produced by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn remrg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Run the finite-difference gradient suite; returns `REMRG_OK` when every
/// component is within tolerance, `REMRG_ERR_VERIFY` otherwise.
#[no_mangle]
pub extern "C" fn remrg_gradcheck(seed: u64) -> c_int {
    if run_gradcheck(seed, false).iter().all(|r| r.pass()) {
        REMRG_OK
    } else {
        REMRG_ERR_VERIFY
    }
}
