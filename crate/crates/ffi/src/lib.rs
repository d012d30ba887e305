//! C interface: load a checkpoint, fuse planar `f32` buffers, compute
//! metrics. Every function returns an [`OtfmStatus`]; on failure the message
//! is kept per thread and read back with [`otfm_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use otfm::imagery::RasterImage;
use otfm::metrics;
use otfm::sampler::FusionModel;
use otfm::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OtfmStatus {
    Ok = 0,
    Argument = 1,
    Format = 2,
    Corruption = 3,
    Config = 4,
    Numerical = 5,
    Io = 6,
    NullPointer = 7,
    Panic = 8,
}

impl From<&Error> for OtfmStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Argument(_) => OtfmStatus::Argument,
            Error::Format { .. } => OtfmStatus::Format,
            Error::Corruption { .. } => OtfmStatus::Corruption,
            Error::Config { .. } => OtfmStatus::Config,
            Error::Numerical(_) => OtfmStatus::Numerical,
            Error::Io { .. } => OtfmStatus::Io,
        }
    }
}

/// Opaque handle to a loaded mapping network.
pub struct OtfmModel {
    inner: FusionModel,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> OtfmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            OtfmStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            OtfmStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            OtfmStatus::from(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            OtfmStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &'static str) -> Result<*const T, Failure> {
    if p.is_null() {
        Err(Failure::Null(what))
    } else {
        Ok(p)
    }
}

unsafe fn image(data: *const f32, bands: usize, h: usize, w: usize, what: &'static str) -> Result<RasterImage, Failure> {
    let p = non_null(data, what)?;
    let n = bands
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or(Failure::Lib(Error::Argument(format!("{what}: size overflows"))))?;
    let slice = std::slice::from_raw_parts(p, n);
    Ok(RasterImage::new(bands, h, w, slice.to_vec())?)
}

/// Copy the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn otfm_last_error(buf: *mut c_char, len: usize) -> usize {
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

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn otfm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Load a checkpoint. `use_ema` selects the averaged weights.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn otfm_model_load(path: *const c_char, use_ema: bool, out: *mut *mut OtfmModel) -> OtfmStatus {
    guard(|| {
        let path = non_null(path, "path")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Error::Argument("path is not UTF-8".into()))?;
        let inner = FusionModel::load(path, use_ema)?;
        *out = Box::into_raw(Box::new(OtfmModel { inner }));
        Ok(())
    })
}

/// Release a handle from [`otfm_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must come from `otfm_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn otfm_model_free(model: *mut OtfmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Band count and resolution ratio of a model.
///
/// # Safety
/// `model` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn otfm_model_info(model: *const OtfmModel, bands: *mut usize, ratio: *mut usize) -> OtfmStatus {
    guard(|| {
        let m = &*non_null(model, "model")?;
        if bands.is_null() || ratio.is_null() {
            return Err(Failure::Null("bands/ratio"));
        }
        *bands = m.inner.bands();
        *ratio = m.inner.ratio();
        Ok(())
    })
}

/// Fuse a planar PAN (`(lr_h·r) × (lr_w·r)`) with a planar LRMS
/// (`bands × lr_h × lr_w`) into `out` (`bands × lr_h·r × lr_w·r`).
///
/// # Safety
/// Buffers must hold the element counts above; `out_len` is checked.
#[no_mangle]
pub unsafe extern "C" fn otfm_fuse(
    model: *const OtfmModel,
    pan: *const f32,
    lrms: *const f32,
    bands: usize,
    lr_h: usize,
    lr_w: usize,
    steps: usize,
    out: *mut f32,
    out_len: usize,
) -> OtfmStatus {
    guard(|| {
        let m = &*non_null(model, "model")?;
        let r = m.inner.ratio();
        let pan = image(pan, 1, lr_h * r, lr_w * r, "pan")?;
        let lrms = image(lrms, bands, lr_h, lr_w, "lrms")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let need = bands * lr_h * r * lr_w * r;
        if out_len < need {
            return Err(Error::Argument(format!("output buffer holds {out_len} values, {need} needed")).into());
        }
        let fused = m.inner.fuse(&pan, &lrms, steps)?;
        ptr::copy_nonoverlapping(fused.data().as_ptr(), out, need);
        Ok(())
    })
}

/// Spectral angle mapper (degrees) between two planar images.
///
/// # Safety
/// `a` and `b` must hold `bands·h·w` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn otfm_sam(a: *const f32, b: *const f32, bands: usize, h: usize, w: usize, out: *mut f64) -> OtfmStatus {
    guard(|| {
        let (x, y) = (image(a, bands, h, w, "a")?, image(b, bands, h, w, "b")?);
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = metrics::sam(&x, &y)?;
        Ok(())
    })
}

/// ERGAS of `fused` against `reference` at resolution ratio `ratio`.
///
/// # Safety
/// As for [`otfm_sam`].
#[no_mangle]
pub unsafe extern "C" fn otfm_ergas(
    fused: *const f32,
    reference: *const f32,
    bands: usize,
    h: usize,
    w: usize,
    ratio: usize,
    out: *mut f64,
) -> OtfmStatus {
    guard(|| {
        let (x, y) = (image(fused, bands, h, w, "fused")?, image(reference, bands, h, w, "reference")?);
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = metrics::ergas(&x, &y, ratio)?;
        Ok(())
    })
}

/// `(1 - d_lambda)(1 - d_s)`; both inputs must lie in `[0, 1]`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn otfm_hqnr(d_lambda: f64, d_s: f64, out: *mut f64) -> OtfmStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = metrics::hqnr(d_lambda, d_s)?;
        Ok(())
    })
}
