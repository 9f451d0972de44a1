//! C interface to trained segmentation and anticipation models and to the
//! evaluation metrics.
//!
//! Every fallible function returns an [`ActdiffStatus`]. On failure the
//! message is kept per thread and can be read with [`actdiff_last_error`].
//! Labels cross the boundary as `uint32_t`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use actdiff::diffusion::Schedule;
use actdiff::engine::{infer_lta, infer_tas, Checkpoint, TrainConfig, Trainer};
use actdiff::metrics;
use actdiff::model::Model;
use actdiff::numerics::Tensor;
use actdiff::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActdiffStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NonFinite = 4,
    Format = 5,
    Checksum = 6,
    Io = 7,
    Panic = 8,
    Internal = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(ActdiffStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape(_) => ActdiffStatus::Shape,
            Error::InvalidArgument(_) | Error::UnknownLabel { .. } => {
                ActdiffStatus::InvalidArgument
            }
            Error::NonFinite(_) => ActdiffStatus::NonFinite,
            Error::Format { .. } | Error::Version { .. } | Error::Json(_) => ActdiffStatus::Format,
            Error::Checksum(_) => ActdiffStatus::Checksum,
            Error::Io(_) => ActdiffStatus::Io,
            Error::NotScalar(_) | Error::TapeConsumed => ActdiffStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(ActdiffStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(ActdiffStatus::InvalidArgument, msg.into())
}

/// Runs `f`, records any error or panic, and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ActdiffStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ActdiffStatus::Ok,
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
            ActdiffStatus::Panic
        }
    }
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn actdiff_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn actdiff_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Trained model with its configuration and noise schedule.
pub struct ActdiffModel {
    model: Model<f32>,
    config: TrainConfig,
    sched: Schedule,
}

/// Loads a checkpoint written by the training command.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn actdiff_model_load(
    path: *const c_char,
    out: *mut *mut ActdiffModel,
) -> ActdiffStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not valid UTF-8"))?;
        let ckpt = Checkpoint::<f32>::load(Path::new(path))?;
        let config = ckpt.config.clone();
        let model = Trainer::from_checkpoint(ckpt)?.model()?;
        let sched = config.schedule()?;
        *out = Box::into_raw(Box::new(ActdiffModel {
            model,
            config,
            sched,
        }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`actdiff_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn actdiff_model_free(model: *mut ActdiffModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Feature dimension the model expects, or 0 for a null model.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn actdiff_model_feature_dim(model: *const ActdiffModel) -> u32 {
    model
        .as_ref()
        .map_or(0, |m| m.config.model.feature_dim as u32)
}

/// Number of action classes, or 0 for a null model.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn actdiff_model_num_classes(model: *const ActdiffModel) -> u32 {
    model
        .as_ref()
        .map_or(0, |m| m.config.model.num_classes as u32)
}

unsafe fn read_features(
    m: &ActdiffModel,
    data: *const f32,
    frames: usize,
    dim: usize,
) -> Result<Tensor<f32>, Failure> {
    if data.is_null() {
        return Err(null("features"));
    }
    if frames == 0 {
        return Err(invalid("no frames"));
    }
    if dim != m.config.model.feature_dim {
        return Err(Failure(
            ActdiffStatus::Shape,
            format!(
                "model expects {} features, got {dim}",
                m.config.model.feature_dim
            ),
        ));
    }
    let values = std::slice::from_raw_parts(data, frames * dim).to_vec();
    Ok(Tensor::new(vec![frames, dim], values)?)
}

unsafe fn write_labels(labels: &[usize], out: *mut u32) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out_labels"));
    }
    let dst = std::slice::from_raw_parts_mut(out, labels.len());
    for (d, &l) in dst.iter_mut().zip(labels) {
        *d = l as u32;
    }
    Ok(())
}

/// Segments a whole video.
///
/// `features` holds `frames * dim` row-major values; `out_labels` receives
/// `frames` labels. Equal seeds give equal output.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn actdiff_segment(
    model: *const ActdiffModel,
    features: *const f32,
    frames: usize,
    dim: usize,
    seed: u64,
    out_labels: *mut u32,
) -> ActdiffStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let x = read_features(m, features, frames, dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = infer_tas(&m.model, &x, &m.sched, &m.config, &mut rng)?;
        write_labels(&labels, out_labels)
    })
}

/// Labels the observed frames and anticipates `horizon` further frames.
///
/// `features` holds only the `observed` frames; `out_labels` receives
/// `observed + horizon` labels.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn actdiff_anticipate(
    model: *const ActdiffModel,
    features: *const f32,
    observed: usize,
    dim: usize,
    horizon: usize,
    seed: u64,
    out_labels: *mut u32,
) -> ActdiffStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let x = read_features(m, features, observed, dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = infer_lta(&m.model, &x, horizon, &m.sched, &m.config, &mut rng)?;
        write_labels(&labels, out_labels)
    })
}

unsafe fn labels(data: *const u32, n: usize, what: &str) -> Result<Vec<usize>, Failure> {
    if data.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(data, n)
        .iter()
        .map(|&l| l as usize)
        .collect())
}

unsafe fn store(out: *mut f64, value: f64) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = value;
    Ok(())
}

/// Percentage of frames where `pred` equals `gt`.
///
/// # Safety
/// `pred` and `gt` must hold `n` labels; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn actdiff_frame_accuracy(
    pred: *const u32,
    gt: *const u32,
    n: usize,
    out: *mut f64,
) -> ActdiffStatus {
    guard(|| {
        let (p, g) = (labels(pred, n, "pred")?, labels(gt, n, "gt")?);
        store(out, metrics::frame_accuracy(&p, &g)?)
    })
}

/// Segmental edit score in `[0, 100]`.
///
/// # Safety
/// `pred` and `gt` must hold `n` labels; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn actdiff_edit_score(
    pred: *const u32,
    gt: *const u32,
    n: usize,
    out: *mut f64,
) -> ActdiffStatus {
    guard(|| {
        let (p, g) = (labels(pred, n, "pred")?, labels(gt, n, "gt")?);
        store(out, metrics::edit_score(&p, &g, &[]))
    })
}

/// Segmental F1 at IoU threshold `k` percent.
///
/// # Safety
/// `pred` and `gt` must hold `n` labels; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn actdiff_f1_at_k(
    pred: *const u32,
    gt: *const u32,
    n: usize,
    k: f64,
    out: *mut f64,
) -> ActdiffStatus {
    guard(|| {
        if !(0.0..=100.0).contains(&k) {
            return Err(invalid(format!("threshold {k} outside [0, 100]")));
        }
        let (p, g) = (labels(pred, n, "pred")?, labels(gt, n, "gt")?);
        store(out, metrics::f1_at_k(&p, &g, k, &[]).0)
    })
}

/// Mean over classes of `future` against `gt[observed..observed + len]`.
///
/// `future` holds `future_len` labels and is padded with its last label or
/// cropped to `len`; `gt` holds `gt_len` labels.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn actdiff_moc(
    future: *const u32,
    future_len: usize,
    gt: *const u32,
    gt_len: usize,
    observed: usize,
    len: usize,
    out: *mut f64,
) -> ActdiffStatus {
    guard(|| {
        let f = labels(future, future_len, "future")?;
        let g = labels(gt, gt_len, "gt")?;
        store(out, metrics::moc(&f, &g, observed, len)?)
    })
}
