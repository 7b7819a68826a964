//! C ABI over the ladi-flood pipeline.
//!
//! Every fallible call returns a [`LadiStatus`]; on failure the message is
//! available from [`ladi_last_error_message`] on the same thread. Indexes
//! and models are opaque handles released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ladi_flood::catalog::{
    curate, load_annotations, read_index, write_index, AnnotationFormat, CatalogError, CuratedIndex, Label,
};
use ladi_flood::dataset::{eval_transform, AugmentationPolicy, RgbImage};
use ladi_flood::evaluation::{self, ConfusionMatrix, FloodClassifier};
use ladi_flood::models::{parameter_count, ModelHandle};
use ladi_flood::training::{load_checkpoint, CheckpointError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LadiStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Schema = 4,
    Checkpoint = 5,
    Runtime = 6,
    Panic = 7,
}

/// Curated index handle.
pub struct LadiIndex {
    inner: CuratedIndex,
}

/// Trained model handle.
pub struct LadiModel {
    handle: ModelHandle,
    policy: AugmentationPolicy,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LadiConfusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

/// `has_precision` / `has_recall` are false when the denominator is zero;
/// the value field is then 0 and must be ignored.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LadiMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub has_precision: bool,
    pub has_recall: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LadiPrediction {
    /// 1 flood, 0 non-flood.
    pub label: u8,
    pub confidence: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(LadiStatus, String);

impl From<CatalogError> for Failure {
    fn from(e: CatalogError) -> Self {
        let status = match e {
            CatalogError::Io { .. } => LadiStatus::Io,
            _ => LadiStatus::Schema,
        };
        Failure(status, e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        let status = match e {
            CheckpointError::Io { .. } => LadiStatus::Io,
            CheckpointError::Corrupt { .. } => LadiStatus::Checkpoint,
        };
        Failure(status, e.to_string())
    }
}

impl From<evaluation::EvalError> for Failure {
    fn from(e: evaluation::EvalError) -> Self {
        let status = match e {
            evaluation::EvalError::LengthMismatch { .. }
            | evaluation::EvalError::EmptyInput
            | evaluation::EvalError::EmptyMatrix => LadiStatus::InvalidArgument,
            _ => LadiStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> LadiStatus {
    match panic::catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            LadiStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LadiStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure(LadiStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Failure(LadiStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

fn null(name: &str) -> Failure {
    Failure(LadiStatus::NullArgument, format!("{name} is null"))
}

fn label_from(v: u8, name: &str) -> Result<Label, Failure> {
    Label::try_from(v).map_err(|_| Failure(LadiStatus::InvalidArgument, format!("{name} value {v} is not 0 or 1")))
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn ladi_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Clean the annotation table at `labels_path`, write the curated index to
/// `out_index` and return a handle to it in `*out` (may be NULL if the
/// handle is not wanted).
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn ladi_prepare(
    labels_path: *const c_char,
    out_index: *const c_char,
    include_machine: bool,
    out: *mut *mut LadiIndex,
) -> LadiStatus {
    guard(|| {
        let labels = path_arg(labels_path, "labels_path")?;
        let dest = path_arg(out_index, "out_index")?;
        let format = AnnotationFormat::from_path(&labels)
            .ok_or_else(|| Failure::from(CatalogError::UnknownFormat { path: labels.clone() }))?;
        let rows = load_annotations(&labels, format)?;
        let index = curate(rows, include_machine, vec![labels.display().to_string()]);
        write_index(&index, &dest)?;
        if !out.is_null() {
            *out = Box::into_raw(Box::new(LadiIndex { inner: index }));
        }
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ladi_index_read(path: *const c_char, out: *mut *mut LadiIndex) -> LadiStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = read_index(&path)?;
        *out = Box::into_raw(Box::new(LadiIndex { inner }));
        Ok(())
    })
}

/// Number of images in the index; 0 for NULL.
///
/// # Safety
/// `index` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ladi_index_len(index: *const LadiIndex) -> usize {
    index.as_ref().map_or(0, |i| i.inner.len())
}

/// Number of images with `label` (1 flood, 0 non-flood); 0 for NULL or an
/// invalid label.
///
/// # Safety
/// `index` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ladi_index_count(index: *const LadiIndex, label: u8) -> usize {
    match (index.as_ref(), Label::try_from(label)) {
        (Some(i), Ok(l)) => i.inner.count(l),
        _ => 0,
    }
}

/// # Safety
/// `index` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ladi_index_free(index: *mut LadiIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Count outcomes of `len` predictions against truths (values 0 or 1).
///
/// # Safety
/// `preds` and `truths` must point to `len` readable bytes; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ladi_confusion(
    preds: *const u8,
    truths: *const u8,
    len: usize,
    out: *mut LadiConfusion,
) -> LadiStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if len > 0 && (preds.is_null() || truths.is_null()) {
            return Err(null("preds/truths"));
        }
        let read = |p: *const u8, name: &str| -> Result<Vec<Label>, Failure> {
            if len == 0 {
                return Ok(Vec::new());
            }
            std::slice::from_raw_parts(p, len)
                .iter()
                .map(|&v| label_from(v, name))
                .collect()
        };
        let cm = evaluation::confusion(&read(preds, "preds")?, &read(truths, "truths")?)?;
        *out = LadiConfusion {
            tp: cm.tp,
            fp: cm.fp,
            tn: cm.tn,
            fn_: cm.fn_,
        };
        Ok(())
    })
}

/// # Safety
/// `cm` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ladi_metrics(cm: *const LadiConfusion, out: *mut LadiMetrics) -> LadiStatus {
    guard(|| {
        let cm = cm.as_ref().ok_or_else(|| null("cm"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let m = evaluation::metrics(&ConfusionMatrix {
            tp: cm.tp,
            fp: cm.fp,
            tn: cm.tn,
            fn_: cm.fn_,
        })?;
        *out = LadiMetrics {
            accuracy: m.accuracy,
            precision: m.precision.unwrap_or(0.0),
            recall: m.recall.unwrap_or(0.0),
            has_precision: m.precision.is_some(),
            has_recall: m.recall.is_some(),
        };
        Ok(())
    })
}

/// Load a checkpoint (weights `.safetensors` or its `.json` sidecar).
///
/// # Safety
/// `checkpoint` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ladi_model_load(checkpoint: *const c_char, out: *mut *mut LadiModel) -> LadiStatus {
    guard(|| {
        let path = path_arg(checkpoint, "checkpoint")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (handle, meta) = load_checkpoint(&path)?;
        *out = Box::into_raw(Box::new(LadiModel {
            handle,
            policy: meta.policy,
        }));
        Ok(())
    })
}

fn classify(model: &LadiModel, img: &RgbImage) -> Result<LadiPrediction, Failure> {
    let arr = eval_transform(img, &model.policy).map_err(|e| Failure(LadiStatus::InvalidArgument, e.to_string()))?;
    let preds = model.handle.classify(&[arr])?;
    let p = preds[0];
    Ok(LadiPrediction {
        label: p.label.as_u8(),
        confidence: p.confidence,
    })
}

/// Classify the image file at `image_path`.
///
/// # Safety
/// `model` must be a live handle, `image_path` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ladi_model_predict_file(
    model: *const LadiModel,
    image_path: *const c_char,
    out: *mut LadiPrediction,
) -> LadiStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let path = path_arg(image_path, "image_path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let img = image::open(&path)
            .map_err(|e| Failure(LadiStatus::Io, format!("{}: {e}", path.display())))?
            .to_rgb8();
        *out = classify(model, &img)?;
        Ok(())
    })
}

/// Classify a packed 8-bit RGB buffer of `width * height * 3` bytes.
///
/// # Safety
/// `rgb` must point to `width * height * 3` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn ladi_model_predict_rgb(
    model: *const LadiModel,
    rgb: *const u8,
    width: u32,
    height: u32,
    out: *mut LadiPrediction,
) -> LadiStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        if width == 0 || height == 0 {
            return Err(Failure(LadiStatus::InvalidArgument, "image has zero size".into()));
        }
        let len = width as usize * height as usize * 3;
        let buf = std::slice::from_raw_parts(rgb, len).to_vec();
        let img = RgbImage::from_raw(width, height, buf)
            .ok_or_else(|| Failure(LadiStatus::InvalidArgument, "bad image dimensions".into()))?;
        *out = classify(model, &img)?;
        Ok(())
    })
}

/// Number of trainable parameters; -1 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ladi_model_parameter_count(model: *const LadiModel) -> i64 {
    model.as_ref().map_or(-1, |m| parameter_count(&m.handle))
}

/// Model input side length in pixels; -1 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ladi_model_input_size(model: *const LadiModel) -> i64 {
    model.as_ref().map_or(-1, |m| m.handle.input_size())
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ladi_model_free(model: *mut LadiModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
