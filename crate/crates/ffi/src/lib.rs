//! C ABI over the `pvtformer` crate.
//!
//! Every fallible function returns a [`PvtStatus`] code. On failure the
//! message is available from [`pvt_last_error`] on the same thread until the
//! next failing call. Panics are caught at the boundary and reported as
//! [`PvtStatus::Panic`]. Models are opaque [`PvtModel`] handles released
//! with [`pvt_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use pvtformer::analysis::{complexity, count_params};
use pvtformer::checkpoint::Checkpoint;
use pvtformer::data::{batch_tensors, nearest_resize, SliceRecord};
use pvtformer::metrics::{evaluate_slice, IouMode, Mask};
use pvtformer::model::{predict_mask, PvtFormer, PvtFormerConfig};
use pvtformer::{Error, Shape4};

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PvtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Checkpoint = 5,
    NonFinite = 6,
    Panic = 7,
    Internal = 8,
}

/// Opaque model handle.
pub struct PvtModel {
    model: PvtFormer<f32>,
}

/// Per-slice metrics. `hd` is meaningful only when `hd_defined` is 1.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PvtSliceMetrics {
    pub dice: f64,
    pub miou: f64,
    pub recall: f64,
    pub precision: f64,
    pub f2: f64,
    pub hd: f64,
    pub hd_defined: i32,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PvtStatus {
    match e {
        Error::InvalidArgument(_) => PvtStatus::InvalidArgument,
        Error::Io { .. } => PvtStatus::Io,
        Error::Format { .. } | Error::Json(_) | Error::Csv(_) => PvtStatus::Format,
        Error::Checkpoint(_) => PvtStatus::Checkpoint,
        Error::NonFinite(_) => PvtStatus::NonFinite,
        _ => PvtStatus::Internal,
    }
}

enum Fail {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PvtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PvtStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            PvtStatus::NullPointer
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            PvtStatus::Panic
        }
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Core(Error::InvalidArgument(format!("{what} is not valid UTF-8"))))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail::Core(Error::InvalidArgument(msg.into()))
}

/// Message of the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pvt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn pvt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a freshly initialised model from a preset name (`default` or
/// `tiny`).
///
/// # Safety
/// `preset` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pvt_model_new(
    preset: *const c_char,
    seed: u64,
    out: *mut *mut PvtModel,
) -> PvtStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let cfg = PvtFormerConfig::preset(c_str(preset, "preset")?)?;
        let model = PvtFormer::new(&cfg, seed)?;
        *out = Box::into_raw(Box::new(PvtModel { model }));
        Ok(())
    })
}

/// Loads a model from a checkpoint file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pvt_model_load(path: *const c_char, out: *mut *mut PvtModel) -> PvtStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let path = c_str(path, "path")?;
        let model = Checkpoint::load(Path::new(path))?.to_model()?;
        *out = Box::into_raw(Box::new(PvtModel { model }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from `pvt_model_new` or `pvt_model_load` and not be
/// used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pvt_model_free(model: *mut PvtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length of the square input the model runs at.
///
/// # Safety
/// Both pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pvt_model_input_size(model: *const PvtModel, out: *mut usize) -> PvtStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        *out_ref(out, "out")? = m.model.config().out_size;
        Ok(())
    })
}

/// Number of trainable scalars.
///
/// # Safety
/// Both pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pvt_model_param_count(model: *const PvtModel, out: *mut u64) -> PvtStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        *out_ref(out, "out")? = count_params(&m.model) as u64;
        Ok(())
    })
}

/// Segments one windowed grayscale slice of `side * side` values in [0, 1].
/// The slice is resized to the model input when sizes differ and the
/// outputs are mapped back to `side * side`. `probs` may be null; `mask`
/// receives 0 or 1 per pixel.
///
/// # Safety
/// `image` must hold `side * side` floats, `mask` (and `probs` when not
/// null) must have room for as many elements.
#[no_mangle]
pub unsafe extern "C" fn pvt_model_predict(
    model: *const PvtModel,
    image: *const f32,
    side: usize,
    threshold: f32,
    probs: *mut f32,
    mask: *mut u8,
) -> PvtStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        if image.is_null() {
            return Err(Fail::Null("image"));
        }
        if mask.is_null() {
            return Err(Fail::Null("mask"));
        }
        if side == 0 {
            return Err(invalid("side must be positive"));
        }
        let n = side.checked_mul(side).ok_or_else(|| invalid("side too large"))?;
        let img = std::slice::from_raw_parts(image, n);
        if !img.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(invalid("image values must lie in [0, 1]"));
        }
        let rec = SliceRecord {
            patient_id: "ffi".into(),
            slice_index: 0,
            size: side,
            image: img.to_vec(),
            mask: vec![0; n],
        };
        let cfg = m.model.config();
        let s = cfg.out_size;
        let (x, _) = batch_tensors(&[&rec], cfg.encoder.in_channels, s)?;
        let p = m.model.forward(&x)?;
        let bin = predict_mask(&p, threshold as f64)?;
        let (p_out, m_out) = if s == side {
            (p.data().to_vec(), bin)
        } else {
            (
                nearest_resize(p.data(), s, s, side, side),
                nearest_resize(&bin, s, s, side, side),
            )
        };
        std::slice::from_raw_parts_mut(mask, n).copy_from_slice(&m_out);
        if !probs.is_null() {
            std::slice::from_raw_parts_mut(probs, n).copy_from_slice(&p_out);
        }
        Ok(())
    })
}

/// Closed-form parameter and MAC counts of a preset at a square input.
///
/// # Safety
/// `preset` must be nul-terminated; `params` and `macs` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pvt_count(
    preset: *const c_char,
    input: usize,
    params: *mut u64,
    macs: *mut u64,
) -> PvtStatus {
    guard(|| {
        let cfg = PvtFormerConfig::preset(c_str(preset, "preset")?)?;
        let r = complexity(&cfg, Shape4::new(1, cfg.encoder.in_channels, input, input))?;
        *out_ref(params, "params")? = r.params;
        *out_ref(macs, "macs")? = r.macs;
        Ok(())
    })
}

/// Metrics of one binary prediction against its ground truth, both
/// row-major `h * w` arrays of 0 or 1. `two_class_iou` selects the mean of
/// foreground and background IoU instead of foreground IoU.
///
/// # Safety
/// `pred` and `gt` must hold `h * w` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pvt_slice_metrics(
    pred: *const u8,
    gt: *const u8,
    h: usize,
    w: usize,
    two_class_iou: i32,
    out: *mut PvtSliceMetrics,
) -> PvtStatus {
    guard(|| {
        if pred.is_null() {
            return Err(Fail::Null("pred"));
        }
        if gt.is_null() {
            return Err(Fail::Null("gt"));
        }
        let out = out_ref(out, "out")?;
        let n = h.checked_mul(w).ok_or_else(|| invalid("mask too large"))?;
        let p = Mask::new(h, w, std::slice::from_raw_parts(pred, n).to_vec())?;
        let g = Mask::new(h, w, std::slice::from_raw_parts(gt, n).to_vec())?;
        let mode = if two_class_iou != 0 {
            IouMode::TwoClass
        } else {
            IouMode::Foreground
        };
        let s = evaluate_slice("ffi", &p, &g, mode)?;
        *out = PvtSliceMetrics {
            dice: s.dice,
            miou: s.miou,
            recall: s.recall,
            precision: s.precision,
            f2: s.f2,
            hd: s.hd.unwrap_or(0.0),
            hd_defined: s.hd.is_some() as i32,
        };
        Ok(())
    })
}
