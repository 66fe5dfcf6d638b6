//! C ABI over the `cl2s` library.
//!
//! Images cross the boundary as interleaved RGB `float` buffers of
//! `height * width * 3` values in `[0, 1]`, row-major. Every fallible call
//! returns a [`Cl2sStatus`]; on failure [`cl2s_last_error_message`] describes
//! the most recent error on the calling thread. Models are opaque handles
//! created by [`cl2s_model_new`] or [`cl2s_model_load`] and released with
//! [`cl2s_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use cl2s::checkpoint;
use cl2s::data::{synthesize_haze, HazeParams};
use cl2s::metrics::{self, Lab};
use cl2s::{Dehazer, Error, Image, ModelConfig, VariantSpec};

/// Result codes of every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cl2sStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    UnknownVariant = 3,
    InvalidInput = 4,
    Io = 5,
    IncompatibleCheckpoint = 6,
    CheckpointParse = 7,
    Runtime = 8,
    Panic = 9,
}

/// Opaque model handle.
pub struct Cl2sModel {
    inner: Dehazer,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> Cl2sStatus {
    match e {
        Error::UnknownVariant(_) | Error::EmptyVariant | Error::DuplicateKind(_) | Error::UnknownKind(_) => {
            Cl2sStatus::UnknownVariant
        }
        Error::NonFinite { .. }
        | Error::ChannelMismatch(_)
        | Error::EmptyImage { .. }
        | Error::ShapeMismatch(_)
        | Error::InputTooSmall { .. }
        | Error::SmallerThanWindow { .. }
        | Error::HazeParams(_) => Cl2sStatus::InvalidInput,
        Error::Io(_) | Error::Output { .. } | Error::Image(_) => Cl2sStatus::Io,
        Error::IncompatibleCheckpoint(_) => Cl2sStatus::IncompatibleCheckpoint,
        Error::CheckpointParse(_) => Cl2sStatus::CheckpointParse,
        Error::Config(_) => Cl2sStatus::InvalidArgument,
        _ => Cl2sStatus::Runtime,
    }
}

struct Fail(Cl2sStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> Cl2sStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => Cl2sStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            Cl2sStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(Cl2sStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(Cl2sStatus::InvalidArgument, format!("`{what}` is not valid UTF-8")))
}

fn pixel_count(height: usize, width: usize) -> Result<usize, Fail> {
    height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(3))
        .filter(|&n| n > 0)
        .ok_or_else(|| Fail(Cl2sStatus::InvalidArgument, format!("invalid image size {height}x{width}")))
}

unsafe fn image_arg(p: *const f32, height: usize, width: usize, what: &str) -> Result<Image, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let n = pixel_count(height, width)?;
    let data = std::slice::from_raw_parts(p, n).iter().map(|&v| v as f64).collect();
    Ok(Image::rgb(height, width, data)?)
}

unsafe fn write_out(dst: *mut f32, values: &[f64]) {
    let out = std::slice::from_raw_parts_mut(dst, values.len());
    for (o, v) in out.iter_mut().zip(values) {
        *o = *v as f32;
    }
}

/// Message of the last failed call on this thread, or NULL if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cl2s_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cl2s_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Builds a freshly initialized model. `variant` is a preset name (e.g.
/// "CL2S") or a comma-separated head list (e.g. "AS,MUL,ADD").
///
/// # Safety
/// `variant` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cl2s_model_new(variant: *const c_char, seed: u64, out: *mut *mut Cl2sModel) -> Cl2sStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let name = str_arg(variant, "variant")?;
        let spec = VariantSpec::preset(name).or_else(|e| VariantSpec::from_heads(name).map_err(|_| e))?;
        let model = Dehazer::on_cpu(&spec, &ModelConfig::default(), seed)?;
        *out = Box::into_raw(Box::new(Cl2sModel { inner: model }));
        Ok(())
    })
}

/// Loads a checkpoint written by the `cl2s` tool or [`cl2s_model_save`].
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cl2s_model_load(path: *const c_char, out: *mut *mut Cl2sModel) -> Cl2sStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let loaded = checkpoint::load_checkpoint(Path::new(path))?;
        *out = Box::into_raw(Box::new(Cl2sModel { inner: loaded.model }));
        Ok(())
    })
}

/// Writes the model to a checkpoint file.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cl2s_model_save(model: *const Cl2sModel, path: *const c_char) -> Cl2sStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let path = str_arg(path, "path")?;
        checkpoint::save_checkpoint(&m.inner, Path::new(path), 0, None, None)?;
        Ok(())
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cl2s_model_free(model: *mut Cl2sModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of active heads (and attention maps), or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn cl2s_model_head_count(model: *const Cl2sModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.attention_arity())
}

/// Dehazes one image. `output` receives `height * width * 3` values. If
/// `attention` is not NULL it receives `head_count * height * width`
/// per-pixel weights, one plane per head in canonical head order.
///
/// # Safety
/// Buffers must hold the documented number of elements.
#[no_mangle]
pub unsafe extern "C" fn cl2s_model_dehaze(
    model: *const Cl2sModel,
    input: *const f32,
    height: usize,
    width: usize,
    output: *mut f32,
    attention: *mut f32,
) -> Cl2sStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if output.is_null() {
            return Err(null("output"));
        }
        let img = image_arg(input, height, width, "input")?;
        let res = m.inner.dehaze(&img)?;
        write_out(output, res.image.data());
        if !attention.is_null() {
            let plane = height * width;
            for k in 0..res.attention.arity() {
                let w = res.attention_image(k)?;
                write_out(attention.add(k * plane), w.data());
            }
        }
        Ok(())
    })
}

type Metric = fn(&Image, &Image) -> cl2s::Result<f64>;

unsafe fn metric(f: Metric, a: *const f32, b: *const f32, height: usize, width: usize, out: *mut f64) -> Cl2sStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let a = image_arg(a, height, width, "a")?;
        let b = image_arg(b, height, width, "b")?;
        *out = f(&a, &b)?;
        Ok(())
    })
}

/// Peak signal-to-noise ratio in dB (peak 1.0); +inf for identical images.
///
/// # Safety
/// `a` and `b` must hold `height * width * 3` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cl2s_psnr(a: *const f32, b: *const f32, height: usize, width: usize, out: *mut f64) -> Cl2sStatus {
    metric(metrics::psnr, a, b, height, width, out)
}

/// Mean SSIM over the three channels (11×11 Gaussian window, σ = 1.5).
///
/// # Safety
/// As for [`cl2s_psnr`].
#[no_mangle]
pub unsafe extern "C" fn cl2s_ssim(a: *const f32, b: *const f32, height: usize, width: usize, out: *mut f64) -> Cl2sStatus {
    metric(metrics::ssim, a, b, height, width, out)
}

/// Mean per-pixel CIEDE2000 colour difference of two sRGB images.
///
/// # Safety
/// As for [`cl2s_psnr`].
#[no_mangle]
pub unsafe extern "C" fn cl2s_ciede2000_mean(a: *const f32, b: *const f32, height: usize, width: usize, out: *mut f64) -> Cl2sStatus {
    metric(metrics::mean_ciede2000, a, b, height, width, out)
}

/// CIEDE2000 difference of two CIELAB colours given as `{L, a, b}`.
///
/// # Safety
/// `lab1` and `lab2` must point to three doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cl2s_ciede2000(lab1: *const f64, lab2: *const f64, out: *mut f64) -> Cl2sStatus {
    guard(|| {
        if lab1.is_null() || lab2.is_null() || out.is_null() {
            return Err(null("lab1/lab2/out"));
        }
        let p = std::slice::from_raw_parts(lab1, 3);
        let q = std::slice::from_raw_parts(lab2, 3);
        *out = metrics::ciede2000(Lab::new(p[0], p[1], p[2]), Lab::new(q[0], q[1], q[2]));
        Ok(())
    })
}

/// Renders haze onto a clear image: `I = J·t + A·(1 − t)`, `t = exp(−β·d)`.
/// `depth` holds `height * width` non-negative values; `airlight` holds
/// three values in `[0.7, 1]`.
///
/// # Safety
/// Buffers must hold the documented number of elements.
#[no_mangle]
pub unsafe extern "C" fn cl2s_synthesize_haze(
    clear: *const f32,
    depth: *const f32,
    height: usize,
    width: usize,
    airlight: *const f32,
    beta: f32,
    hazy: *mut f32,
) -> Cl2sStatus {
    guard(|| {
        if depth.is_null() || airlight.is_null() || hazy.is_null() {
            return Err(null("depth/airlight/hazy"));
        }
        let clear = image_arg(clear, height, width, "clear")?;
        let a = std::slice::from_raw_parts(airlight, 3);
        let params = HazeParams {
            airlight: [a[0] as f64, a[1] as f64, a[2] as f64],
            beta: beta as f64,
            height,
            width,
            depth: std::slice::from_raw_parts(depth, height * width)
                .iter()
                .map(|&d| d as f64)
                .collect(),
        };
        let out = synthesize_haze(&clear, &params)?;
        write_out(hazy, out.data());
        Ok(())
    })
}
