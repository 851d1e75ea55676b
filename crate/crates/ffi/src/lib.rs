//! C ABI over the `vqacoin` crate.
//!
//! Every fallible function returns a [`VqaStatus`]. On failure a message is
//! kept per thread and can be read with [`vqa_last_error`]. Strings handed out
//! by the library must be released with [`vqa_string_free`], models with
//! [`vqa_model_free`]. No function panics across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use vqacoin::diffmath::Tensor;
use vqacoin::eval::{answer_question, soft_accuracy, AccuracyMode};
use vqacoin::model::{load_checkpoint, VqaCoin};
use vqacoin::textprep::{normalize_answer, semantic_info, Wordlists};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VqaStatus {
    Ok = 0,
    /// A required pointer was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Invalid configuration or a checkpoint built for other dimensions.
    Config = 3,
    /// Unreadable, corrupt or inconsistent input data.
    Data = 4,
    /// A computation produced a non-finite value.
    Numeric = 5,
    /// A Rust panic was caught; the library state is unchanged.
    Internal = 6,
}

/// A loaded model. Opaque to C.
pub struct VqaModel {
    inner: VqaCoin,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: VqaStatus, message: impl Into<String>) -> VqaStatus {
    set_error(message.into());
    status
}

fn from_error(e: vqacoin::Error) -> VqaStatus {
    let status = match e.exit_code() {
        vqacoin::EXIT_CONFIG => VqaStatus::Config,
        vqacoin::EXIT_NUMERIC => VqaStatus::Numeric,
        _ => VqaStatus::Data,
    };
    fail(status, e.to_string())
}

/// Runs `f`, turning panics into [`VqaStatus::Internal`] and clearing the
/// last error on success.
fn guard(f: impl FnOnce() -> Result<(), VqaStatus>) -> VqaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            VqaStatus::Ok
        }
        Ok(Err(status)) => status,
        Err(_) => fail(VqaStatus::Internal, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, VqaStatus> {
    if p.is_null() {
        return Err(fail(VqaStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(VqaStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn str_array(p: *const *const c_char, len: usize, name: &str) -> Result<Vec<String>, VqaStatus> {
    if len == 0 {
        return Ok(Vec::new());
    }
    if p.is_null() {
        return Err(fail(VqaStatus::NullArgument, format!("{name} is null")));
    }
    std::slice::from_raw_parts(p, len)
        .iter()
        .enumerate()
        .map(|(i, &s)| str_arg(s, &format!("{name}[{i}]")).map(str::to_owned))
        .collect()
}

fn out_string(out: *mut *mut c_char, value: String) -> Result<(), VqaStatus> {
    let c = CString::new(value).map_err(|_| fail(VqaStatus::Data, "result contains a NUL byte"))?;
    unsafe { *out = c.into_raw() };
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library on the same thread; do not free.
#[no_mangle]
pub extern "C" fn vqa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file. On success `*out` owns a new model.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn vqa_model_load(path: *const c_char, out: *mut *mut VqaModel) -> VqaStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(VqaStatus::NullArgument, "out is null"));
        }
        let path = str_arg(path, "path")?;
        let ck = load_checkpoint(Path::new(path), None).map_err(|e| from_error(e.into()))?;
        *out = Box::into_raw(Box::new(VqaModel { inner: ck.model }));
        Ok(())
    })
}

/// Releases a model from [`vqa_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must come from [`vqa_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vqa_model_free(model: *mut VqaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of candidate answers, or 0 for a null model.
///
/// # Safety
/// `model` must be null or a live model.
#[no_mangle]
pub unsafe extern "C" fn vqa_model_answer_count(model: *const VqaModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.answers.len())
}

/// Width of one image-feature row the model expects, or 0 for a null model.
///
/// # Safety
/// `model` must be null or a live model.
#[no_mangle]
pub unsafe extern "C" fn vqa_model_feature_dim(model: *const VqaModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config.d_image)
}

/// Answers `question` about an image given as `rows × cols` row-major
/// features and `si_len` semantic-information words. On success `*out_answer`
/// holds a string to release with [`vqa_string_free`].
///
/// # Safety
/// `features` must point to `rows * cols` doubles, `si_words` to `si_len`
/// NUL-terminated strings (may be null when `si_len` is 0), and
/// `out_answer` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vqa_model_predict(
    model: *const VqaModel,
    features: *const f64,
    rows: usize,
    cols: usize,
    question: *const c_char,
    si_words: *const *const c_char,
    si_len: usize,
    out_answer: *mut *mut c_char,
) -> VqaStatus {
    guard(|| {
        let model = model
            .as_ref()
            .ok_or_else(|| fail(VqaStatus::NullArgument, "model is null"))?;
        if features.is_null() || out_answer.is_null() {
            return Err(fail(VqaStatus::NullArgument, "features or out_answer is null"));
        }
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| fail(VqaStatus::Data, "feature size overflows"))?;
        let data = std::slice::from_raw_parts(features, n).to_vec();
        let feats = Tensor::new(vec![rows, cols], data).map_err(|e| from_error(e.into()))?;
        let question = str_arg(question, "question")?;
        let si = str_array(si_words, si_len, "si_words")?;
        let answer = answer_question(&model.inner, feats, question, &si).map_err(|e| from_error(e.into()))?;
        out_string(out_answer, answer)
    })
}

/// Soft accuracy of `predicted` against exactly ten annotator answers,
/// `min(matches / 3, 1)` after normalization. `exact` non-zero averages over
/// the ten leave-one-out subsets instead.
///
/// # Safety
/// `predicted` must be a NUL-terminated string, `annotators` point to
/// `n_annotators` such strings, and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn vqa_soft_accuracy(
    predicted: *const c_char,
    annotators: *const *const c_char,
    n_annotators: usize,
    exact: i32,
    out: *mut f64,
) -> VqaStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(VqaStatus::NullArgument, "out is null"));
        }
        let pred = normalize_answer(str_arg(predicted, "predicted")?);
        let answers: Vec<String> = str_array(annotators, n_annotators, "annotators")?
            .iter()
            .map(|a| normalize_answer(a))
            .collect();
        let mode = if exact != 0 { AccuracyMode::Exact } else { AccuracyMode::Direct };
        *out = soft_accuracy(&pred, &answers, mode).map_err(|e| from_error(e.into()))?;
        Ok(())
    })
}

/// Semantic-information words for one image's captions, as a JSON array
/// string in `*out_json` (release with [`vqa_string_free`]).
///
/// # Safety
/// `captions` must point to `n_captions` NUL-terminated strings (may be null
/// when `n_captions` is 0) and `out_json` be writable.
#[no_mangle]
pub unsafe extern "C" fn vqa_semantic_info(
    captions: *const *const c_char,
    n_captions: usize,
    out_json: *mut *mut c_char,
) -> VqaStatus {
    guard(|| {
        if out_json.is_null() {
            return Err(fail(VqaStatus::NullArgument, "out_json is null"));
        }
        let caps = str_array(captions, n_captions, "captions")?;
        let words = semantic_info(&caps, &Wordlists::shipped());
        out_string(out_json, serde_json::to_string(&words).expect("strings serialize"))
    })
}

/// Releases a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vqa_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
