//! C ABI over the `maskinv` engine in single precision.
//!
//! Every fallible call returns a [`MaskinvStatus`]; on failure the message is
//! kept per thread and read with [`maskinv_last_error_message`]. Handles are
//! opaque and released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use maskinv::inversion::{mask_inversion_encoded, GradPath, InversionConfig};
use maskinv::{EncoderActivations, Error, ImageTensor, Model, ModelConfig, QueryMask};

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskinvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Load = 5,
    Usage = 6,
    Internal = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskinvGradPath {
    Vanilla = 0,
    Decomposed = 1,
}

/// Inversion settings; start from [`maskinv_inversion_config_default`].
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct MaskinvInversionConfig {
    pub steps: usize,
    pub alpha: f64,
    pub learning_rate: f64,
    pub epsilon: f64,
    pub grad_path: MaskinvGradPath,
}

/// A loaded encoder.
pub struct MaskinvModel(Model<f32>);

/// Cached activations of one encoded image.
pub struct MaskinvActivations(EncoderActivations<f32>);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MaskinvStatus {
    match e {
        Error::Argument(_) | Error::Optimizer(_) => MaskinvStatus::InvalidArgument,
        Error::Io(_) | Error::Image(_) => MaskinvStatus::Io,
        Error::Parse { .. } | Error::Json(_) | Error::Data(_) => MaskinvStatus::Parse,
        Error::Load(_) | Error::MissingWeight(_) | Error::ShapeMismatch { .. } => {
            MaskinvStatus::Load
        }
        Error::Usage(_) => MaskinvStatus::Usage,
    }
}

struct Fail(MaskinvStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MaskinvStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MaskinvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MaskinvStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MaskinvStatus::Internal
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| {
        Fail(
            MaskinvStatus::InvalidArgument,
            format!("{what} is not UTF-8"),
        )
    })?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    match (p.is_null(), len) {
        (_, 0) => Ok(&[]),
        (true, _) => Err(null(what)),
        (false, _) => Ok(std::slice::from_raw_parts(p, len)),
    }
}

unsafe fn out_slice<'a>(
    p: *mut f32,
    len: usize,
    want: usize,
    what: &str,
) -> Result<&'a mut [f32], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    if len < want {
        return Err(Fail(
            MaskinvStatus::InvalidArgument,
            format!("{what} holds {len} values, {want} needed"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn maskinv_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn maskinv_inversion_config_default() -> MaskinvInversionConfig {
    let d = InversionConfig::default();
    MaskinvInversionConfig {
        steps: d.steps,
        alpha: d.alpha,
        learning_rate: d.learning_rate,
        epsilon: d.epsilon,
        grad_path: MaskinvGradPath::Decomposed,
    }
}

/// Loads a weight container with its JSON config. With `resample_pos`
/// nonzero a positional grid of another size is resampled.
///
/// # Safety
/// Paths must be nul-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn maskinv_model_load(
    weights_path: *const c_char,
    config_path: *const c_char,
    resample_pos: i32,
    out: *mut *mut MaskinvModel,
) -> MaskinvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let weights = path_arg(weights_path, "weights_path")?;
        let config = ModelConfig::from_json_file(path_arg(config_path, "config_path")?)?;
        let model = if resample_pos != 0 {
            Model::load_resampled(weights, &config)?
        } else {
            Model::load(weights, &config)?
        };
        *out = Box::into_raw(Box::new(MaskinvModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`maskinv_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn maskinv_model_free(model: *mut MaskinvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side of the square input image in pixels, 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn maskinv_model_image_size(model: *const MaskinvModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config().image_size)
}

/// Length of embeddings, 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn maskinv_model_joint_dim(model: *const MaskinvModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config().joint_dim)
}

/// Side of the patch grid (and of explainability maps), 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn maskinv_model_grid_size(model: *const MaskinvModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config().grid())
}

/// Encodes a normalized `3 × S × S` channel-major image.
///
/// # Safety
/// `pixels` must hold `len` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn maskinv_encode(
    model: *const MaskinvModel,
    pixels: *const f32,
    len: usize,
    out: *mut *mut MaskinvActivations,
) -> MaskinvStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let data = slice_arg(pixels, len, "pixels")?.to_vec();
        let image = ImageTensor::new(model.0.config().image_size, data)?;
        *out = Box::into_raw(Box::new(MaskinvActivations(model.0.encode(&image)?)));
        Ok(())
    })
}

/// # Safety
/// `acts` must come from [`maskinv_encode`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn maskinv_activations_free(acts: *mut MaskinvActivations) {
    if !acts.is_null() {
        drop(Box::from_raw(acts));
    }
}

/// Copies the projected class token into `out`.
///
/// # Safety
/// `out` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn maskinv_activations_cls(
    acts: *const MaskinvActivations,
    out: *mut f32,
    len: usize,
) -> MaskinvStatus {
    guard(|| {
        let acts = acts.as_ref().ok_or_else(|| null("acts"))?;
        let cls = &acts.0.cls;
        out_slice(out, len, cls.len(), "out")?[..cls.len()].copy_from_slice(cls);
        Ok(())
    })
}

/// Inverts `mask_count` binary masks of `S × S` bytes each (nonzero is
/// foreground), laid out back to back. Embeddings are written row by row
/// to `out`, which must hold `mask_count × joint_dim` floats.
///
/// # Safety
/// Pointers must be valid for the given lengths; `config` may be null for
/// the defaults.
#[no_mangle]
pub unsafe extern "C" fn maskinv_invert(
    model: *const MaskinvModel,
    acts: *const MaskinvActivations,
    masks: *const u8,
    mask_count: usize,
    config: *const MaskinvInversionConfig,
    out: *mut f32,
    out_len: usize,
) -> MaskinvStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let acts = acts.as_ref().ok_or_else(|| null("acts"))?;
        let c = config
            .as_ref()
            .copied()
            .unwrap_or_else(|| maskinv_inversion_config_default());
        let size = model.0.config().image_size;
        let bytes = slice_arg(masks, mask_count * size * size, "masks")?;
        let queries = bytes
            .chunks_exact(size * size)
            .map(|m| {
                let bits: Vec<u8> = m.iter().map(|&v| u8::from(v != 0)).collect();
                QueryMask::from_values(size, size, &bits)
            })
            .collect::<maskinv::Result<Vec<_>>>()?;
        let cfg = InversionConfig {
            steps: c.steps,
            alpha: c.alpha,
            learning_rate: c.learning_rate,
            epsilon: c.epsilon,
            grad_path: match c.grad_path {
                MaskinvGradPath::Vanilla => GradPath::Vanilla,
                MaskinvGradPath::Decomposed => GradPath::Decomposed,
            },
            record_trace: false,
            ..InversionConfig::default()
        };
        let d = model.0.config().joint_dim;
        let out = out_slice(out, out_len, mask_count * d, "out")?;
        let results = mask_inversion_encoded(&model.0, &acts.0, &queries, &cfg)?;
        for (row, e) in out.chunks_exact_mut(d).zip(&results) {
            row.copy_from_slice(&e.vector);
        }
        Ok(())
    })
}

/// Writes the `g × g` explainability map of `embedding` in `[0, 1]`,
/// row-major, to `out`.
///
/// # Safety
/// `embedding` must hold `dim` floats and `out` `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn maskinv_explain(
    model: *const MaskinvModel,
    acts: *const MaskinvActivations,
    embedding: *const f32,
    dim: usize,
    out: *mut f32,
    out_len: usize,
) -> MaskinvStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let acts = acts.as_ref().ok_or_else(|| null("acts"))?;
        let e = slice_arg(embedding, dim, "embedding")?;
        let map = maskinv::explain(&model.0, &acts.0, e)?;
        out_slice(out, out_len, map.grid.len(), "out")?[..map.grid.len()]
            .copy_from_slice(&map.grid);
        Ok(())
    })
}
