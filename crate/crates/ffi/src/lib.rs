//! C ABI over docweave: documents, reading order, synthetic corpora and
//! fine-tuned model inference.
//!
//! Every fallible call returns a [`DwStatus`]. On failure the message is
//! available from [`dw_last_error`] on the same thread. Objects are opaque
//! handles released with their `_free` function; strings returned to the
//! caller are released with [`dw_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use docweave::doc::{load_ocr_json, parse_ocr_json, Document};
use docweave::embedder::Vocab;
use docweave::harness::corpus::save_corpus;
use docweave::harness::{gen_synthetic_corpus, load_task_model, predict, Checkpoint, RunConfig, SyntheticSpec, TaskModel};
use docweave::numerics::ParamStore;
use docweave::serializer::{layout_order, raster_scan_order};
use docweave::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DwStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    InvalidDocument = 5,
    Checkpoint = 6,
    Config = 7,
    BufferTooSmall = 8,
    Internal = 9,
}

/// Word ordering strategy for [`dw_reading_order`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DwOrderMethod {
    Raster = 0,
    Layout = 1,
}

/// A loaded document.
pub struct DwDocument {
    doc: Document,
}

/// A token vocabulary.
pub struct DwVocab {
    vocab: Vocab,
}

/// A fine-tuned encoder with its task head.
pub struct DwModel {
    cfg: RunConfig,
    store: ParamStore,
    model: TaskModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("NUL bytes were replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DwStatus {
    match e {
        Error::Io { .. } => DwStatus::Io,
        Error::Json { .. } => DwStatus::Parse,
        Error::InvalidWord { .. } | Error::InvalidDocument(_) | Error::Image(_) => DwStatus::InvalidDocument,
        Error::Checkpoint(_) => DwStatus::Checkpoint,
        Error::Config(_) => DwStatus::Config,
        Error::InvalidArgument(_) | Error::Shape(_) | Error::OutOfVocabulary { .. } => DwStatus::InvalidArgument,
        _ => DwStatus::Internal,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (DwStatus, String)>) -> DwStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DwStatus::Ok,
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DwStatus::Internal
        }
    }
}

fn lib<T>(r: docweave::Result<T>) -> Result<T, (DwStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (DwStatus, String) {
    (DwStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `s` is null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(s: *const c_char, what: &str) -> Result<&'a str, (DwStatus, String)> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| (DwStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// # Safety
/// `p` is null or points to a live `T`.
unsafe fn obj<'a, T>(p: *const T, what: &str) -> Result<&'a T, (DwStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

/// # Safety
/// `out` is null or writable.
unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), (DwStatus, String)> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. Valid until
/// the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn dw_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn dw_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads an OCR-JSON document from `path`.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn dw_document_load(path: *const c_char, out: *mut *mut DwDocument) -> DwStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let doc = lib(load_ocr_json(Path::new(path)))?;
        put(out, DwDocument { doc })
    })
}

/// Parses an OCR-JSON document held in memory. Image references are not
/// resolved.
///
/// # Safety
/// `json` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn dw_document_parse(json: *const c_char, out: *mut *mut DwDocument) -> DwStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        let doc = lib(parse_ocr_json(text, None))?;
        put(out, DwDocument { doc })
    })
}

/// # Safety
/// `doc` is null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dw_document_free(doc: *mut DwDocument) {
    if !doc.is_null() {
        drop(Box::from_raw(doc));
    }
}

/// Number of words, 0 for NULL.
///
/// # Safety
/// `doc` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dw_document_word_count(doc: *const DwDocument) -> usize {
    doc.as_ref().map_or(0, |d| d.doc.len())
}

/// Writes the word permutation into `order` (capacity `cap`) and its length
/// into `len`. When `cap` is too small nothing is written to `order`,
/// `len` receives the required size and the call returns
/// `DW_STATUS_BUFFER_TOO_SMALL`.
///
/// # Safety
/// `doc` is a live handle; `order` has room for `cap` values; `len` is
/// writable.
#[no_mangle]
pub unsafe extern "C" fn dw_reading_order(
    doc: *const DwDocument,
    method: DwOrderMethod,
    order: *mut usize,
    cap: usize,
    len: *mut usize,
) -> DwStatus {
    guard(|| {
        let doc = &obj(doc, "document")?.doc;
        if len.is_null() {
            return Err(null("len"));
        }
        let perm = match method {
            DwOrderMethod::Raster => raster_scan_order(doc).permutation,
            DwOrderMethod::Layout => layout_order(doc).permutation,
        };
        *len = perm.len();
        if perm.len() > cap {
            return Err((DwStatus::BufferTooSmall, format!("order needs {} slots, got {cap}", perm.len())));
        }
        if !perm.is_empty() {
            if order.is_null() {
                return Err(null("order"));
            }
            ptr::copy_nonoverlapping(perm.as_ptr(), order, perm.len());
        }
        Ok(())
    })
}

/// Loads a vocabulary file (one token per line).
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn dw_vocab_load(path: *const c_char, out: *mut *mut DwVocab) -> DwStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let vocab = lib(Vocab::load(Path::new(path)))?;
        put(out, DwVocab { vocab })
    })
}

/// # Safety
/// `vocab` is null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dw_vocab_free(vocab: *mut DwVocab) {
    if !vocab.is_null() {
        drop(Box::from_raw(vocab));
    }
}

/// Writes `n` synthetic pages with images and `vocab.txt` into `dir`.
///
/// # Safety
/// `dir` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dw_generate_corpus(dir: *const c_char, n: usize, seed: u64) -> DwStatus {
    guard(|| {
        let dir = str_arg(dir, "dir")?;
        let spec = SyntheticSpec::default();
        let docs = lib(gen_synthetic_corpus(&spec, n, seed))?;
        lib(save_corpus(Path::new(dir), &docs, &lib(spec.vocab())?, true))
    })
}

/// Loads a fine-tuned checkpoint (one written with task head labels).
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn dw_model_load(path: *const c_char, out: *mut *mut DwModel) -> DwStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let ck = lib(Checkpoint::load(Path::new(path)))?;
        if ck.labels.is_empty() {
            return Err((DwStatus::Checkpoint, "checkpoint has no task head".into()));
        }
        let (cfg, store, model) = lib(load_task_model(&ck))?;
        put(out, DwModel { cfg, store, model })
    })
}

/// # Safety
/// `model` is null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dw_model_free(model: *mut DwModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Runs the model's head on `doc` and returns the prediction as a JSON
/// string in `out`, freed with [`dw_string_free`]. `question` is required
/// for QA heads and ignored otherwise; it may be NULL.
///
/// # Safety
/// Handles are live; `question` is null or NUL-terminated; `out` is
/// writable.
#[no_mangle]
pub unsafe extern "C" fn dw_model_predict_json(
    model: *const DwModel,
    vocab: *const DwVocab,
    doc: *const DwDocument,
    question: *const c_char,
    out: *mut *mut c_char,
) -> DwStatus {
    guard(|| {
        let m = obj(model, "model")?;
        let vocab = &obj(vocab, "vocab")?.vocab;
        let doc = &obj(doc, "document")?.doc;
        let question = if question.is_null() { None } else { Some(str_arg(question, "question")?) };
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let p = lib(predict(&m.cfg, &m.store, &m.model, doc, vocab, question))?;
        let json = serde_json::to_string(&p).map_err(|e| (DwStatus::Internal, e.to_string()))?;
        *out = CString::new(json).expect("JSON has no NUL bytes").into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` is null or a string returned by this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dw_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
