//! C ABI over `dcls-core`.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! functions and released with the matching `*_free`. Every fallible call
//! returns a [`DclsStatus`]; after a failure, [`dcls_last_error`] copies a
//! description of it. Panics are caught and reported as
//! [`DclsStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dcls_core::audio::{self, AudioClip, FrontendConfig};
use dcls_core::dcls::DclsVersion;
use dcls_core::model::{
    build_model, count_params, depthwise_weight_count, load_checkpoint, save_checkpoint, surgery_replace_dsc_with_dcls, CheckpointError,
    CheckpointMeta, ConvMethod, Model, ModelError, ModelSpec, SurgeryOptions,
};
use dcls_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DclsStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// An argument was out of range or not valid UTF-8.
    InvalidArgument = 2,
    /// A file could not be read or written.
    Io = 3,
    /// A file was read but its contents are malformed.
    Format = 4,
    /// Input or output buffer sizes do not match the model.
    Shape = 5,
    /// The library panicked; the handle arguments should be discarded.
    Panic = 6,
}

/// Trained or freshly initialized model.
pub struct DclsModel {
    inner: Model<f32>,
}

/// Normalized log-mel spectrogram of shape 1 × mels × frames.
pub struct DclsSpectrogram {
    inner: Tensor<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(DclsStatus, String);

impl Failure {
    fn invalid(msg: impl Into<String>) -> Self {
        Failure(DclsStatus::InvalidArgument, msg.into())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        let status = match e {
            ModelError::Input { .. } => DclsStatus::Shape,
            _ => DclsStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        let io = matches!(&e, CheckpointError::Container(dcls_core::container::ContainerError::Io { .. }));
        Failure(if io { DclsStatus::Io } else { DclsStatus::Format }, e.to_string())
    }
}

impl From<audio::AudioError> for Failure {
    fn from(e: audio::AudioError) -> Self {
        let status = match e {
            audio::AudioError::Io { .. } => DclsStatus::Io,
            audio::AudioError::Malformed { .. } | audio::AudioError::Unsupported { .. } => DclsStatus::Format,
            _ => DclsStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

/// Runs `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DclsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DclsStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            DclsStatus::Panic
        }
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(DclsStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(DclsStatus::NullPointer, format!("{what} is null")))
}

fn out_ptr<T>(p: *mut T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(DclsStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Copies the message of the calling thread's last failure into `buf`
/// (NUL-terminated, truncated to `len` bytes). Returns the full message
/// length excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn dcls_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Builds a preset (`"mini"` or `"convnext-t"`) with the given depthwise
/// method (`"dsc7"`, `"dcls"`, `"dcls:S:M:gauss"`, ...). `classes` 0 keeps
/// the preset's class count.
///
/// # Safety
/// `preset` and `conv` must be NUL-terminated strings; `out` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dcls_model_new(
    preset: *const c_char,
    conv: *const c_char,
    classes: u32,
    seed: u64,
    out: *mut *mut DclsModel,
) -> DclsStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let preset = c_str(preset, "preset")?;
        let conv: ConvMethod = c_str(conv, "conv")?.parse().map_err(Failure::invalid)?;
        let classes = (classes > 0).then_some(classes as usize);
        let spec = ModelSpec::preset(preset, classes)?.with_conv_method(conv);
        spec.validate()?;
        let model = build_model(&spec, &mut ChaCha8Rng::seed_from_u64(seed))?;
        *out = Box::into_raw(Box::new(DclsModel { inner: model }));
        Ok(())
    })
}

/// Reads a checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dcls_model_load(path: *const c_char, out: *mut *mut DclsModel) -> DclsStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let path = PathBuf::from(c_str(path, "path")?);
        let (model, _) = load_checkpoint(&path)?;
        *out = Box::into_raw(Box::new(DclsModel { inner: model }));
        Ok(())
    })
}

/// Writes a checkpoint recording `seed` in its metadata.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dcls_model_save(model: *const DclsModel, path: *const c_char, seed: u64) -> DclsStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let path = PathBuf::from(c_str(path, "path")?);
        save_checkpoint(&model.inner, &CheckpointMeta { seed }, &path)?;
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dcls_model_free(model: *mut DclsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Total parameter count (shared positions and sigmas counted once).
///
/// # Safety
/// `model` must be a live handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dcls_model_param_count(model: *const DclsModel, out: *mut u64) -> DclsStatus {
    guard(|| {
        let model = handle(model, "model")?;
        out_ptr(out, "out")?;
        *out = count_params(&model.inner).total as u64;
        Ok(())
    })
}

/// Parameters of the depthwise spatial convolutions, biases excluded.
///
/// # Safety
/// `model` must be a live handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dcls_model_depthwise_weight_count(model: *const DclsModel, out: *mut u64) -> DclsStatus {
    guard(|| {
        let model = handle(model, "model")?;
        out_ptr(out, "out")?;
        *out = depthwise_weight_count(&model.inner) as u64;
        Ok(())
    })
}

/// Number of output classes.
///
/// # Safety
/// `model` must be a live handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dcls_model_num_classes(model: *const DclsModel, out: *mut u32) -> DclsStatus {
    guard(|| {
        let model = handle(model, "model")?;
        out_ptr(out, "out")?;
        *out = model.inner.spec.num_classes as u32;
        Ok(())
    })
}

/// Eval-mode logits for `batch` spectrograms of `mels × frames`, stored
/// contiguously in `input`. `logits` receives `batch × classes` values.
///
/// # Safety
/// `input` must point to `batch·mels·frames` floats and `logits` to
/// `logits_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn dcls_model_predict(
    model: *const DclsModel,
    input: *const f32,
    batch: usize,
    mels: usize,
    frames: usize,
    logits: *mut f32,
    logits_len: usize,
) -> DclsStatus {
    guard(|| {
        let model = handle(model, "model")?;
        if input.is_null() || logits.is_null() {
            return Err(Failure(DclsStatus::NullPointer, "input or logits is null".into()));
        }
        let classes = model.inner.spec.num_classes;
        if logits_len != batch * classes {
            return Err(Failure(DclsStatus::Shape, format!("logits holds {logits_len} values, need {}", batch * classes)));
        }
        let n = batch * mels * frames;
        let x = Tensor::new([batch, 1, mels, frames], std::slice::from_raw_parts(input, n).to_vec())
            .map_err(|e| Failure(DclsStatus::Shape, e.to_string()))?;
        let y = model.inner.predict(&x)?;
        std::slice::from_raw_parts_mut(logits, logits_len).copy_from_slice(y.data());
        Ok(())
    })
}

/// Replaces every 7×7 depthwise convolution by DCLS (`version` 0 = gauss,
/// 1 = bilinear) and returns the converted model as a new handle. The
/// number of replaced layers is written to `replaced` when non-null.
///
/// # Safety
/// `model` must be a live handle; `out` must be a valid pointer;
/// `replaced` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn dcls_model_surgery(
    model: *const DclsModel,
    dilated_size: u32,
    kernel_count: u32,
    version: u32,
    seed: u64,
    out: *mut *mut DclsModel,
    replaced: *mut u32,
) -> DclsStatus {
    guard(|| {
        let model = handle(model, "model")?;
        out_ptr(out, "out")?;
        let version = match version {
            0 => DclsVersion::Gauss,
            1 => DclsVersion::Bilinear,
            v => return Err(Failure::invalid(format!("unknown DCLS version {v}"))),
        };
        let opts = SurgeryOptions { dilated_size: dilated_size as usize, kernel_count: kernel_count as usize, version };
        let (converted, report) = surgery_replace_dsc_with_dcls(&model.inner, &opts, &mut ChaCha8Rng::seed_from_u64(seed))?;
        if !replaced.is_null() {
            *replaced = report.replaced.len() as u32;
        }
        *out = Box::into_raw(Box::new(DclsModel { inner: converted }));
        Ok(())
    })
}

/// Log-mel spectrogram of mono samples at `sample_rate`. Other rates than
/// 32 kHz are rejected unless `resample` is true.
///
/// # Safety
/// `samples` must point to `len` floats; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dcls_spectrogram_new(
    samples: *const f32,
    len: usize,
    sample_rate: u32,
    resample: bool,
    out: *mut *mut DclsSpectrogram,
) -> DclsStatus {
    guard(|| {
        out_ptr(out, "out")?;
        if samples.is_null() {
            return Err(Failure(DclsStatus::NullPointer, "samples is null".into()));
        }
        let cfg = FrontendConfig::default();
        let mut clip = AudioClip::new(std::slice::from_raw_parts(samples, len).to_vec(), sample_rate);
        if resample && sample_rate != cfg.sample_rate {
            clip = audio::resample_linear(&clip, cfg.sample_rate);
        }
        let inner = audio::logmel(&clip, &cfg)?;
        *out = Box::into_raw(Box::new(DclsSpectrogram { inner }));
        Ok(())
    })
}

/// Log-mel spectrogram of a WAV file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dcls_spectrogram_from_wav(path: *const c_char, resample: bool, out: *mut *mut DclsSpectrogram) -> DclsStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let path = PathBuf::from(c_str(path, "path")?);
        let cfg = FrontendConfig::default();
        let clip = audio::load_wav(&path, cfg.sample_rate, resample)?;
        let inner = audio::logmel(&clip, &cfg)?;
        *out = Box::into_raw(Box::new(DclsSpectrogram { inner }));
        Ok(())
    })
}

/// Mel bands and frames of a spectrogram.
///
/// # Safety
/// `spec` must be a live handle; `mels` and `frames` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dcls_spectrogram_dims(spec: *const DclsSpectrogram, mels: *mut usize, frames: *mut usize) -> DclsStatus {
    guard(|| {
        let spec = handle(spec, "spectrogram")?;
        out_ptr(mels, "mels")?;
        out_ptr(frames, "frames")?;
        let shape = spec.inner.shape();
        *mels = shape[1];
        *frames = shape[2];
        Ok(())
    })
}

/// Copies the mel-major values into `buf`, which must hold exactly
/// `mels × frames` floats.
///
/// # Safety
/// `spec` must be a live handle; `buf` must point to `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn dcls_spectrogram_copy(spec: *const DclsSpectrogram, buf: *mut f32, len: usize) -> DclsStatus {
    guard(|| {
        let spec = handle(spec, "spectrogram")?;
        out_ptr(buf, "buf")?;
        let data = spec.inner.data();
        if len != data.len() {
            return Err(Failure(DclsStatus::Shape, format!("buffer holds {len} values, need {}", data.len())));
        }
        std::slice::from_raw_parts_mut(buf, len).copy_from_slice(data);
        Ok(())
    })
}

/// Releases a spectrogram. Null is ignored.
///
/// # Safety
/// `spec` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dcls_spectrogram_free(spec: *mut DclsSpectrogram) {
    if !spec.is_null() {
        drop(Box::from_raw(spec));
    }
}
