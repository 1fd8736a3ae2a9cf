//! C ABI for the fundps core: opaque handles, integer error codes, and a
//! thread-local last-error message. The matching declarations live in
//! `include/fundps.h`.

use std::cell::RefCell;
use std::ffi::{c_char, c_double, c_int, CStr, CString};
use std::path::Path;
use std::ptr;

use fundps::denoiser::{Denoiser, DenoiserModel};
use fundps::error::Error;
use fundps::field::{Field, Grid2D};
use fundps::grf::{build_sampler, CovarianceSpec, GrfSampler};
use fundps::sampler::karras_schedule;

pub const FUNDPS_OK: c_int = 0;
pub const FUNDPS_ERR_INVALID_ARGUMENT: c_int = 1;
pub const FUNDPS_ERR_SHAPE_MISMATCH: c_int = 2;
pub const FUNDPS_ERR_IO: c_int = 3;
pub const FUNDPS_ERR_CHECKPOINT: c_int = 4;
pub const FUNDPS_ERR_NUMERIC: c_int = 5;
pub const FUNDPS_ERR_CONFIG: c_int = 6;
pub const FUNDPS_ERR_NULL_POINTER: c_int = 7;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(e: &Error) -> c_int {
    let msg = CString::new(format!("{e}")).unwrap_or_default();
    LAST_ERROR.with(|s| *s.borrow_mut() = Some(msg));
    match e.category() {
        "invalid-argument" => FUNDPS_ERR_INVALID_ARGUMENT,
        "shape-mismatch" => FUNDPS_ERR_SHAPE_MISMATCH,
        "io" => FUNDPS_ERR_IO,
        "checkpoint" | "bad-magic" | "version-mismatch" | "truncated" => FUNDPS_ERR_CHECKPOINT,
        "config" => FUNDPS_ERR_CONFIG,
        _ => FUNDPS_ERR_NUMERIC,
    }
}

fn null_error(what: &str) -> c_int {
    let msg = CString::new(format!("null pointer: {what}")).unwrap_or_default();
    LAST_ERROR.with(|s| *s.borrow_mut() = Some(msg));
    FUNDPS_ERR_NULL_POINTER
}

/// Returns the message of the most recent error on this thread, or null.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fundps_last_error_message() -> *const c_char {
    LAST_ERROR.with(|s| match s.borrow().as_ref() {
        Some(m) => m.as_ptr(),
        None => ptr::null(),
    })
}

/// Opaque Gaussian random field sampler.
pub struct FundpsGrf {
    inner: GrfSampler,
}

/// Opaque trained denoiser model.
pub struct FundpsModel {
    inner: DenoiserModel,
}

/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn fundps_grf_new_rbf(
    nx: usize,
    ny: usize,
    length_scale: c_double,
    out: *mut *mut FundpsGrf,
) -> c_int {
    if out.is_null() {
        return null_error("out");
    }
    let build = || -> Result<GrfSampler, Error> {
        build_sampler(&CovarianceSpec::rbf(length_scale), Grid2D::new(nx, ny)?)
    };
    match build() {
        Ok(s) => {
            *out = Box::into_raw(Box::new(FundpsGrf { inner: s }));
            FUNDPS_OK
        }
        Err(e) => set_error(&e),
    }
}

/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn fundps_grf_new_matern(
    nx: usize,
    ny: usize,
    tau: c_double,
    alpha: c_double,
    scale: c_double,
    out: *mut *mut FundpsGrf,
) -> c_int {
    if out.is_null() {
        return null_error("out");
    }
    let build = || -> Result<GrfSampler, Error> {
        build_sampler(&CovarianceSpec::matern_op(tau, alpha, scale), Grid2D::new(nx, ny)?)
    };
    match build() {
        Ok(s) => {
            *out = Box::into_raw(Box::new(FundpsGrf { inner: s }));
            FUNDPS_OK
        }
        Err(e) => set_error(&e),
    }
}

/// Draws one field into `out` (row-major, `ny * nx` doubles).
///
/// # Safety
/// `grf` must be a live handle and `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fundps_grf_sample(
    grf: *const FundpsGrf,
    seed: u64,
    sigma: c_double,
    out: *mut c_double,
    out_len: usize,
) -> c_int {
    if grf.is_null() {
        return null_error("grf");
    }
    if out.is_null() {
        return null_error("out");
    }
    let sampler = &(*grf).inner;
    let need = sampler.grid.len();
    if out_len != need {
        return set_error(&Error::ShapeMismatch(format!(
            "buffer holds {out_len} values, grid needs {need}"
        )));
    }
    let f = sampler.sample(seed, sigma);
    ptr::copy_nonoverlapping(f.values().as_ptr(), out, need);
    FUNDPS_OK
}

/// # Safety
/// `grf` must be a handle returned by a constructor, or null.
#[no_mangle]
pub unsafe extern "C" fn fundps_grf_free(grf: *mut FundpsGrf) {
    if !grf.is_null() {
        drop(Box::from_raw(grf));
    }
}

/// Writes the Karras noise schedule (n + 1 values, last is 0) into `out`.
///
/// # Safety
/// `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fundps_karras_schedule(
    n: usize,
    sigma_min: c_double,
    sigma_max: c_double,
    rho: c_double,
    out: *mut c_double,
    out_len: usize,
) -> c_int {
    if out.is_null() {
        return null_error("out");
    }
    match karras_schedule(n, sigma_min, sigma_max, rho) {
        Ok(s) => {
            if out_len != s.sigmas.len() {
                return set_error(&Error::ShapeMismatch(format!(
                    "buffer holds {out_len} values, schedule has {}",
                    s.sigmas.len()
                )));
            }
            ptr::copy_nonoverlapping(s.sigmas.as_ptr(), out, s.sigmas.len());
            FUNDPS_OK
        }
        Err(e) => set_error(&e),
    }
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn fundps_model_load(
    path: *const c_char,
    out: *mut *mut FundpsModel,
) -> c_int {
    if path.is_null() {
        return null_error("path");
    }
    if out.is_null() {
        return null_error("out");
    }
    let path = match CStr::from_ptr(path).to_str() {
        Ok(p) => p,
        Err(_) => return set_error(&Error::Config("path is not valid UTF-8".into())),
    };
    match DenoiserModel::load(Path::new(path)) {
        Ok(m) => {
            *out = Box::into_raw(Box::new(FundpsModel { inner: m }));
            FUNDPS_OK
        }
        Err(e) => set_error(&e),
    }
}

/// Applies the (EMA) denoiser to a noisy field in place of `out`.
/// `data` and `out` are row-major `channels * ny * nx` doubles.
///
/// # Safety
/// All pointers must be valid for their stated lengths.
#[no_mangle]
pub unsafe extern "C" fn fundps_model_denoise(
    model: *const FundpsModel,
    data: *const c_double,
    channels: usize,
    ny: usize,
    nx: usize,
    sigma: c_double,
    out: *mut c_double,
) -> c_int {
    if model.is_null() {
        return null_error("model");
    }
    if data.is_null() || out.is_null() {
        return null_error("data/out");
    }
    let run = || -> Result<Field, Error> {
        let grid = Grid2D::new(nx, ny)?;
        let values = std::slice::from_raw_parts(data, channels * ny * nx).to_vec();
        let f = Field::new(grid, channels, values)?;
        (*model).inner.denoise(&f, sigma)
    };
    match run() {
        Ok(f) => {
            ptr::copy_nonoverlapping(f.values().as_ptr(), out, channels * ny * nx);
            FUNDPS_OK
        }
        Err(e) => set_error(&e),
    }
}

/// # Safety
/// `model` must be a handle returned by `fundps_model_load`, or null.
#[no_mangle]
pub unsafe extern "C" fn fundps_model_free(model: *mut FundpsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
