//! C interface to the age classifier.
//!
//! Every function returns an [`AgStatus`]; on failure a description is kept
//! per thread and can be read with [`ag_last_error`]. Models are opaque
//! handles created by `ag_model_new` / `ag_model_load` and released with
//! `ag_model_free`. Pixel buffers are row-major `f32` in `[0, 1]`, channel last.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ageformer::datamodel::{AgeClass, NUM_CLASSES};
use ageformer::evaluation::compute_metrics;
use ageformer::model::{AgeFormer, ModelConfig, Prediction};
use ageformer::preprocessing::{FaceInput, VideoClip};
use ageformer::Error;
use ndarray::{Array3, Array4};

/// Number of age classes; the length of every per-class array.
pub const AG_NUM_CLASSES: usize = 4;
const _: () = assert!(AG_NUM_CLASSES == NUM_CLASSES);

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Data = 4,
    Model = 5,
    Numeric = 6,
    Panic = 7,
}

/// Built-in model sizes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AgPreset {
    Desk = 0,
    Paper = 1,
}

/// Opaque model handle.
pub struct AgModel {
    inner: AgeFormer,
}

/// Class prediction for one clip.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct AgPrediction {
    /// 0 baby/toddler, 1 adolescent, 2 adult, 3 elderly.
    pub class_index: u32,
    pub probs: [f64; AG_NUM_CLASSES],
    pub logits: [f64; AG_NUM_CLASSES],
}

/// Input geometry a model expects.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct AgClipShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub face_size: usize,
}

/// Summary scores of a prediction set.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct AgMetrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Row = true class, column = predicted class.
    pub confusion: [[u64; AG_NUM_CLASSES]; AG_NUM_CLASSES],
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> AgStatus {
    match err.exit_code() {
        2 => AgStatus::InvalidArgument,
        3 => AgStatus::Io,
        4 => AgStatus::Data,
        6 => AgStatus::Numeric,
        _ => AgStatus::Model,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

/// Runs `f`, recording any failure or panic for `ag_last_error`.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AgStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AgStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is null"));
            AgStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            AgStatus::InvalidArgument
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            AgStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    // SAFETY: the caller passes either null or a valid pointer.
    unsafe { p.as_ref() }.ok_or(Fail::Null(what))
}

fn out_ptr<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    // SAFETY: as above, for a writable location.
    unsafe { p.as_mut() }.ok_or(Fail::Null(what))
}

fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null("path"));
    }
    // SAFETY: non-null and nul-terminated per the contract.
    let s = unsafe { CStr::from_ptr(p) }.to_str().map_err(|_| Fail::Arg("path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

fn slice_arg<'a>(p: *const f32, len: usize, what: &'static str) -> Result<&'a [f32], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    // SAFETY: the caller guarantees `len` readable floats.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

fn put_model(out: *mut *mut AgModel, model: AgeFormer) -> Result<(), Fail> {
    let slot = out_ptr(out, "out")?;
    *slot = Box::into_raw(Box::new(AgModel { inner: model }));
    Ok(())
}

/// Description of the last failure on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn ag_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Creates a freshly initialized model.
#[no_mangle]
pub extern "C" fn ag_model_new(preset: AgPreset, seed: u64, out: *mut *mut AgModel) -> AgStatus {
    guard(|| {
        let cfg = match preset {
            AgPreset::Desk => ModelConfig::desk(),
            AgPreset::Paper => ModelConfig::paper(),
        };
        put_model(out, AgeFormer::new(&cfg, seed)?)
    })
}

/// Loads a model checkpoint written by the command-line tool or `ag_model_save`.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ag_model_load(path: *const c_char, out: *mut *mut AgModel) -> AgStatus {
    guard(|| {
        let path = path_arg(path)?;
        put_model(out, AgeFormer::load(&path)?)
    })
}

/// # Safety
/// `model` must come from this library and `path` be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn ag_model_save(model: *const AgModel, path: *const c_char) -> AgStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        m.inner.save(&path_arg(path)?)?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ag_model_free(model: *mut AgModel) {
    if !model.is_null() {
        // SAFETY: created by Box::into_raw in put_model.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ag_model_clip_shape(model: *const AgModel, out: *mut AgClipShape) -> AgStatus {
    guard(|| {
        let cfg = non_null(model, "model")?.inner.config();
        *out_ptr(out, "out")? = AgClipShape {
            frames: cfg.video.frames,
            height: cfg.video.height,
            width: cfg.video.width,
            face_size: cfg.face.input_size,
        };
        Ok(())
    })
}

/// Classifies one clip.
///
/// `frames` holds `n_frames * height * width * 3` values matching
/// `ag_model_clip_shape`. `face` holds `face_size * face_size * 3` values of an
/// aligned crop, or is null when no face was found.
///
/// # Safety
/// Buffers must be at least the stated sizes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ag_model_predict(
    model: *const AgModel,
    frames: *const f32,
    n_frames: usize,
    height: usize,
    width: usize,
    face: *const f32,
    face_size: usize,
    out: *mut AgPrediction,
) -> AgStatus {
    guard(|| {
        let m = &non_null(model, "model")?.inner;
        let out = out_ptr(out, "out")?;
        let len = n_frames
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .and_then(|v| v.checked_mul(3))
            .ok_or_else(|| Fail::Arg("clip dimensions overflow".into()))?;
        let pixels = slice_arg(frames, len, "frames")?.to_vec();
        let arr = Array4::from_shape_vec((n_frames, height, width, 3), pixels).map_err(|e| Fail::Arg(e.to_string()))?;
        let clip = VideoClip::new(arr, (0..n_frames).collect());
        let face = if face.is_null() {
            FaceInput::absent(m.config().face.input_size)
        } else {
            let n = face_size
                .checked_mul(face_size)
                .and_then(|v| v.checked_mul(3))
                .ok_or_else(|| Fail::Arg("face dimensions overflow".into()))?;
            let arr = Array3::from_shape_vec((face_size, face_size, 3), slice_arg(face, n, "face")?.to_vec())
                .map_err(|e| Fail::Arg(e.to_string()))?;
            FaceInput::present(arr)
        };
        *out = to_c(&m.predict(&clip, &face)?);
        Ok(())
    })
}

fn to_c(p: &Prediction) -> AgPrediction {
    AgPrediction {
        class_index: p.class.index() as u32,
        probs: p.distribution.probs,
        logits: p.logits,
    }
}

/// Zeroes the additive terms of the face path, so that an absent face leaves
/// predictions identical to the video stream alone. Writes the number of
/// tensors touched to `zeroed` when it is non-null.
///
/// # Safety
/// `model` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn ag_model_zero_support_biases(model: *mut AgModel, zeroed: *mut usize) -> AgStatus {
    guard(|| {
        let m = out_ptr(model, "model")?;
        let n = m.inner.zero_support_path_biases();
        // SAFETY: null or writable per the contract.
        if let Some(z) = unsafe { zeroed.as_mut() } {
            *z = n;
        }
        Ok(())
    })
}

/// Scores `n` predictions against labels; both arrays hold class indices 0-3.
///
/// # Safety
/// `preds` and `labels` must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ag_metrics(preds: *const u32, labels: *const u32, n: usize, out: *mut AgMetrics) -> AgStatus {
    guard(|| {
        if preds.is_null() {
            return Err(Fail::Null("preds"));
        }
        if labels.is_null() {
            return Err(Fail::Null("labels"));
        }
        let out = out_ptr(out, "out")?;
        // SAFETY: both arrays hold `n` values per the contract.
        let (p, l) = unsafe { (std::slice::from_raw_parts(preds, n), std::slice::from_raw_parts(labels, n)) };
        let classes = |xs: &[u32]| -> Result<Vec<AgeClass>, Fail> {
            xs.iter()
                .map(|&i| AgeClass::from_index(i as usize).ok_or_else(|| Fail::Arg(format!("class index {i} is out of range"))))
                .collect()
        };
        let r = compute_metrics(&classes(p)?, &classes(l)?)?;
        *out = AgMetrics {
            accuracy: r.accuracy,
            macro_precision: r.macro_precision,
            macro_recall: r.macro_recall,
            macro_f1: r.macro_f1,
            confusion: r.confusion.map(|row| row.map(|c| c as u64)),
        };
        Ok(())
    })
}
