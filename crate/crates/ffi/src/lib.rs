//! C ABI over the `echocal` inference path and heatmap coding.
//!
//! Every fallible function returns an [`EchocalStatus`]. On failure a
//! message is kept per thread and can be read with [`echocal_last_error`].
//! Models are opaque handles created by [`echocal_model_load`] and released
//! with [`echocal_model_free`]. Coordinates are pixels with `x` the column
//! and `y` the row. Landmark arrays hold six `(x, y)` pairs in the order
//! IVS top, IVS bottom, LVID top, LVID bottom, LVPW top, LVPW bottom.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use echocal::data::Image;
use echocal::geometry::{measurements_from_landmarks, LandmarkSet, NUM_LANDMARKS, NUM_MEASUREMENTS};
use echocal::heatmap::{decode_to_landmarks, encode_labels, HeatmapConfig, HeatmapKind, HeatmapStack};
use echocal::model::{load_checkpoint, ModelError};
use echocal::pipeline::{ModelPredictor, PipelineError};

/// Side of the square input image in pixels.
pub const ECHOCAL_IMAGE_SIZE: usize = 256;
/// Landmarks per image; each is an `(x, y)` pair.
pub const ECHOCAL_NUM_LANDMARKS: usize = 6;
/// Measurements per image: IVS, LVID, LVPW.
pub const ECHOCAL_NUM_MEASUREMENTS: usize = 3;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EchocalStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Model = 5,
    Panic = 6,
}

/// Opaque model handle.
pub struct EchocalModel {
    predictor: ModelPredictor,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(EchocalStatus, String);

impl Failure {
    fn null(what: &str) -> Self {
        Failure(EchocalStatus::NullPointer, format!("{what} is null"))
    }

    fn arg(message: impl Into<String>) -> Self {
        Failure(EchocalStatus::InvalidArgument, message.into())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        let status = match e {
            ModelError::Checkpoint { .. } | ModelError::CheckpointVersion { .. } => EchocalStatus::Checkpoint,
            ModelError::Io { .. } => EchocalStatus::Io,
            ModelError::InputShape { .. } => EchocalStatus::InvalidArgument,
            _ => EchocalStatus::Model,
        };
        Failure(status, e.to_string())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Model(m) => m.into(),
            PipelineError::Io { .. } => Failure(EchocalStatus::Io, e.to_string()),
            other => Failure(EchocalStatus::Model, other.to_string()),
        }
    }
}

impl From<echocal::heatmap::HeatmapError> for Failure {
    fn from(e: echocal::heatmap::HeatmapError) -> Self {
        Failure::arg(e.to_string())
    }
}

/// Runs `f`, records any failure or panic, and returns its status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EchocalStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EchocalStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {message}"));
            EchocalStatus::Panic
        }
    }
}

unsafe fn read_landmarks(ptr: *const f64) -> Result<LandmarkSet, Failure> {
    if ptr.is_null() {
        return Err(Failure::null("landmarks"));
    }
    let v = std::slice::from_raw_parts(ptr, 2 * NUM_LANDMARKS);
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Failure::arg("landmarks must be finite"));
    }
    let mut pairs = [[0.0; 2]; NUM_LANDMARKS];
    for (k, p) in pairs.iter_mut().enumerate() {
        *p = [v[2 * k], v[2 * k + 1]];
    }
    Ok(LandmarkSet::from_pairs(pairs))
}

unsafe fn write_landmarks(lm: &LandmarkSet, out: *mut f64) {
    let out = std::slice::from_raw_parts_mut(out, 2 * NUM_LANDMARKS);
    for (k, [x, y]) in lm.to_pairs().into_iter().enumerate() {
        out[2 * k] = x;
        out[2 * k + 1] = y;
    }
}

unsafe fn write_lengths(lm: &LandmarkSet, out: *mut f64) {
    let lengths = measurements_from_landmarks(lm).lengths();
    std::slice::from_raw_parts_mut(out, NUM_MEASUREMENTS).copy_from_slice(&lengths);
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn echocal_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn echocal_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint. On success `*out` owns a handle for [`echocal_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn echocal_model_load(path: *const c_char, out: *mut *mut EchocalModel) -> EchocalStatus {
    guard(|| {
        if path.is_null() {
            return Err(Failure::null("path"));
        }
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        *out = std::ptr::null_mut();
        let path = CStr::from_ptr(path).to_str().map_err(|_| Failure::arg("path is not UTF-8"))?;
        let (net, _) = load_checkpoint(Path::new(path))?;
        let predictor = ModelPredictor::new(net, "unet")?;
        *out = Box::into_raw(Box::new(EchocalModel { predictor }));
        Ok(())
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `model` must come from [`echocal_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn echocal_model_free(model: *mut EchocalModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of trainable parameters.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn echocal_model_parameter_count(model: *const EchocalModel, out: *mut usize) -> EchocalStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| Failure::null("model"))?;
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        *out = m.predictor.net.parameter_count();
        Ok(())
    })
}

/// Side of the network's input raster (the image is downsampled to it internally).
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn echocal_model_input_size(model: *const EchocalModel, out: *mut usize) -> EchocalStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| Failure::null("model"))?;
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        *out = m.predictor.net.config().input_size;
        Ok(())
    })
}

/// Predicts landmarks for a 256x256 grayscale image, row-major, intensities in [0, 1].
/// Writes 12 values to `landmarks_out` and, when not NULL, 3 lengths to `lengths_out`.
///
/// # Safety
/// `pixels` must hold `width * height` floats; output buffers must be large enough.
#[no_mangle]
pub unsafe extern "C" fn echocal_infer(
    model: *mut EchocalModel,
    pixels: *const f32,
    width: usize,
    height: usize,
    landmarks_out: *mut f64,
    lengths_out: *mut f64,
) -> EchocalStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| Failure::null("model"))?;
        if pixels.is_null() {
            return Err(Failure::null("pixels"));
        }
        if landmarks_out.is_null() {
            return Err(Failure::null("landmarks_out"));
        }
        if width != ECHOCAL_IMAGE_SIZE || height != ECHOCAL_IMAGE_SIZE {
            return Err(Failure::arg(format!("image must be {0}x{0}, got {width}x{height}", ECHOCAL_IMAGE_SIZE)));
        }
        let data = std::slice::from_raw_parts(pixels, width * height).to_vec();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Failure::arg("pixels must be finite"));
        }
        let lm = m.predictor.predict_image(&Image::from_vec(width, height, data))?;
        write_landmarks(&lm, landmarks_out);
        if !lengths_out.is_null() {
            write_lengths(&lm, lengths_out);
        }
        Ok(())
    })
}

/// Renders the six label heatmaps, channel-major, into `out` (`out_len >= 6 * height * width`).
///
/// # Safety
/// `landmarks` must hold 12 doubles and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn echocal_encode_labels(
    landmarks: *const f64,
    height: usize,
    width: usize,
    sigma_long: f64,
    variance_ratio: f64,
    out: *mut f64,
    out_len: usize,
) -> EchocalStatus {
    guard(|| {
        let lm = read_landmarks(landmarks)?;
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        let need = NUM_LANDMARKS * height * width;
        if out_len < need {
            return Err(Failure::arg(format!("out holds {out_len} values, need {need}")));
        }
        let cfg = HeatmapConfig { sigma_long, variance_ratio };
        let (stack, _) = encode_labels(&lm, &measurements_from_landmarks(&lm), height, width, &cfg)?;
        std::slice::from_raw_parts_mut(out, need).copy_from_slice(stack.data());
        Ok(())
    })
}

/// Decodes six channel-major heatmaps to landmarks by soft centre of mass.
/// With `raw` set the channels are network scores and are softmax-normalized
/// first; otherwise they must be non-negative with positive mass.
///
/// # Safety
/// `heatmaps` must hold `6 * height * width` doubles and `landmarks_out` 12.
#[no_mangle]
pub unsafe extern "C" fn echocal_decode_heatmaps(
    heatmaps: *const f64,
    height: usize,
    width: usize,
    raw: bool,
    landmarks_out: *mut f64,
) -> EchocalStatus {
    guard(|| {
        if heatmaps.is_null() {
            return Err(Failure::null("heatmaps"));
        }
        if landmarks_out.is_null() {
            return Err(Failure::null("landmarks_out"));
        }
        if height == 0 || width == 0 {
            return Err(Failure::arg("heatmaps must be non-empty"));
        }
        let data = std::slice::from_raw_parts(heatmaps, NUM_LANDMARKS * height * width).to_vec();
        let kind = if raw { HeatmapKind::PredictedRaw } else { HeatmapKind::PredictedNormalized };
        if !raw {
            for c in data.chunks_exact(height * width) {
                if c.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || c.iter().sum::<f64>() <= 0.0 {
                    return Err(Failure::arg("probability heatmaps must be finite, non-negative and have positive mass"));
                }
            }
        }
        let stack = HeatmapStack::from_vec(kind, height, width, data)?;
        write_landmarks(&decode_to_landmarks(&stack)?, landmarks_out);
        Ok(())
    })
}

/// Lengths of IVS, LVID and LVPW in pixels.
///
/// # Safety
/// `landmarks` must hold 12 doubles and `lengths_out` 3.
#[no_mangle]
pub unsafe extern "C" fn echocal_measurements(landmarks: *const f64, lengths_out: *mut f64) -> EchocalStatus {
    guard(|| {
        let lm = read_landmarks(landmarks)?;
        if lengths_out.is_null() {
            return Err(Failure::null("lengths_out"));
        }
        write_lengths(&lm, lengths_out);
        Ok(())
    })
}
