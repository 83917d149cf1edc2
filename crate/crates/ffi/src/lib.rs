//! C interface to the `metasr` library.
//!
//! Objects are opaque heap handles released with the matching `*_free`
//! function. Every fallible call returns a [`MetasrStatus`]; on failure the
//! message is available from [`metasr_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use metasr::data::{bicubic_resize, ColorSpace, ImagePlane};
use metasr::meta_upscale::ScaleFactor;
use metasr::metrics::evaluate_pair;
use metasr::model::MetaSr;
use metasr::{checkpoint, Error};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetasrStatus {
    Ok = 0,
    InvalidArgument = 1,
    Config = 2,
    Io = 3,
    Checkpoint = 4,
    Shape = 5,
    NullPointer = 6,
    Panic = 7,
}

/// A loaded model. Safe to share between threads for concurrent upscaling.
pub struct MetasrModel {
    inner: MetaSr<f32>,
}

/// An RGB image with values in [0, 1].
pub struct MetasrImage {
    inner: ImagePlane,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> MetasrStatus {
    match e {
        Error::Config(_) => MetasrStatus::Config,
        Error::InvalidArgument(_) => MetasrStatus::InvalidArgument,
        Error::Io { .. } | Error::Image { .. } | Error::Dataset(_) => MetasrStatus::Io,
        Error::Checkpoint { .. } => MetasrStatus::Checkpoint,
        Error::Shape { .. } => MetasrStatus::Shape,
    }
}

struct Fail(MetasrStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MetasrStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MetasrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MetasrStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MetasrStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(MetasrStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn image_ref<'a>(img: *const MetasrImage) -> Result<&'a ImagePlane, Fail> {
    img.as_ref().map(|i| &i.inner).ok_or_else(|| null("image"))
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the most recent failure on this thread, or null. The pointer
/// stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn metasr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn metasr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn metasr_model_load(path: *const c_char, out: *mut *mut MetasrModel) -> MetasrStatus {
    guard(|| {
        let path = path_arg(path)?;
        let inner = checkpoint::load_model::<f32>(&path)?;
        emit(out, MetasrModel { inner })
    })
}

/// # Safety
/// `model` must come from [`metasr_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn metasr_model_free(model: *mut MetasrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn metasr_image_load(path: *const c_char, out: *mut *mut MetasrImage) -> MetasrStatus {
    guard(|| {
        let path = path_arg(path)?;
        emit(out, MetasrImage { inner: ImagePlane::load(&path)? })
    })
}

/// Copies `height * width * 3` interleaved 8-bit RGB values into a new image.
///
/// # Safety
/// `rgb` must point to that many readable bytes.
#[no_mangle]
pub unsafe extern "C" fn metasr_image_from_rgb8(
    rgb: *const u8,
    width: usize,
    height: usize,
    out: *mut *mut MetasrImage,
) -> MetasrStatus {
    guard(|| {
        if rgb.is_null() {
            return Err(null("pixel buffer"));
        }
        let n = width
            .checked_mul(height)
            .and_then(|p| p.checked_mul(3))
            .ok_or_else(|| Fail(MetasrStatus::InvalidArgument, "image size overflows".into()))?;
        let src = std::slice::from_raw_parts(rgb, n);
        let plane = width * height;
        let mut px = vec![0.0; n];
        for (i, rgb) in src.chunks_exact(3).enumerate() {
            for c in 0..3 {
                px[c * plane + i] = rgb[c] as f64 / 255.0;
            }
        }
        emit(out, MetasrImage { inner: ImagePlane::new(height, width, ColorSpace::Rgb, px)? })
    })
}

/// # Safety
/// `img` must be a live image handle or null.
#[no_mangle]
pub unsafe extern "C" fn metasr_image_width(img: *const MetasrImage) -> usize {
    img.as_ref().map_or(0, |i| i.inner.width())
}

/// # Safety
/// `img` must be a live image handle or null.
#[no_mangle]
pub unsafe extern "C" fn metasr_image_height(img: *const MetasrImage) -> usize {
    img.as_ref().map_or(0, |i| i.inner.height())
}

/// Writes interleaved 8-bit RGB into `buf`, which must hold at least
/// `height * width * 3` bytes.
///
/// # Safety
/// `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn metasr_image_copy_rgb8(img: *const MetasrImage, buf: *mut u8, len: usize) -> MetasrStatus {
    guard(|| {
        let img = image_ref(img)?;
        if buf.is_null() {
            return Err(null("buffer"));
        }
        let raw = img.to_rgb8().into_raw();
        if len < raw.len() {
            return Err(Fail(
                MetasrStatus::InvalidArgument,
                format!("buffer holds {len} bytes, image needs {}", raw.len()),
            ));
        }
        ptr::copy_nonoverlapping(raw.as_ptr(), buf, raw.len());
        Ok(())
    })
}

/// # Safety
/// `img` must be a live image handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn metasr_image_save_png(img: *const MetasrImage, path: *const c_char) -> MetasrStatus {
    guard(|| {
        let img = image_ref(img)?;
        Ok(img.save_png(&path_arg(path)?)?)
    })
}

/// # Safety
/// `img` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn metasr_image_free(img: *mut MetasrImage) {
    if !img.is_null() {
        drop(Box::from_raw(img));
    }
}

/// `floor(len * scale)`, the side length produced by every resize here.
///
/// # Safety
/// `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn metasr_output_len(len: usize, scale: f64, out: *mut usize) -> MetasrStatus {
    guard(|| {
        let r = ScaleFactor::new(scale)?;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        *out = r.output_len(len);
        Ok(())
    })
}

/// Upscales `img` by `scale` into a new image.
///
/// # Safety
/// `model` and `img` must be live handles and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn metasr_upscale(
    model: *const MetasrModel,
    img: *const MetasrImage,
    scale: f64,
    out: *mut *mut MetasrImage,
) -> MetasrStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let img = image_ref(img)?;
        let r = ScaleFactor::new(scale)?;
        emit(out, MetasrImage { inner: model.inner.upscale(img, r)? })
    })
}

/// MATLAB-style bicubic resize by `scale` into a new image.
///
/// # Safety
/// `img` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn metasr_bicubic(img: *const MetasrImage, scale: f64, out: *mut *mut MetasrImage) -> MetasrStatus {
    guard(|| {
        let img = image_ref(img)?;
        emit(out, MetasrImage { inner: bicubic_resize(img, scale)? })
    })
}

/// Y-channel PSNR and SSIM of `sr` against `hr`, shaving `ceil(scale)`
/// pixels. Either output pointer may be null.
///
/// # Safety
/// `sr` and `hr` must be live handles.
#[no_mangle]
pub unsafe extern "C" fn metasr_quality(
    sr: *const MetasrImage,
    hr: *const MetasrImage,
    scale: f64,
    psnr: *mut f64,
    ssim: *mut f64,
) -> MetasrStatus {
    guard(|| {
        let q = evaluate_pair(image_ref(sr)?, image_ref(hr)?, scale)?;
        if !psnr.is_null() {
            *psnr = q.psnr;
        }
        if !ssim.is_null() {
            *ssim = q.ssim;
        }
        Ok(())
    })
}
