//! C ABI over the core crate: opaque model handles, integer error codes,
//! and a thread-local last-error message. All buffers cross the boundary as
//! doubles regardless of the model's training precision.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::{c_char, c_double, c_int};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use gnpm::checkpoint::Checkpoint;
use gnpm::config::Precision;
use gnpm::eval;
use gnpm::knn;
use gnpm::model::{GnpmModel, LatentBank};
use gnpm::optim;

pub const GNPM_OK: c_int = 0;
pub const GNPM_ERR_NULL_ARG: c_int = 1;
pub const GNPM_ERR_INVALID_ARG: c_int = 2;
pub const GNPM_ERR_IO: c_int = 3;
pub const GNPM_ERR_RUNTIME: c_int = 4;
pub const GNPM_ERR_PANIC: c_int = 5;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

/// Message for the most recent failure on this thread. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn gnpm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn gnpm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

enum ModelInner {
    F32(GnpmModel<f32>, LatentBank<f32>),
    F64(GnpmModel<f64>, LatentBank<f64>),
}

/// Opaque handle over a trained model plus its latent code bank.
pub struct GnpmModelHandle {
    inner: ModelInner,
}

fn guard<F: FnOnce() -> c_int>(f: F) -> c_int {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => code,
        Err(_) => {
            set_error("internal panic");
            GNPM_ERR_PANIC
        }
    }
}

unsafe fn cstr_path<'a>(p: *const c_char) -> Result<&'a Path, c_int> {
    if p.is_null() {
        set_error("null path");
        return Err(GNPM_ERR_NULL_ARG);
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(GNPM_ERR_INVALID_ARG)
        }
    }
}

/// Load a trained checkpoint into a model handle. Returns GNPM_OK and writes
/// the handle through `out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gnpm_model_load(
    path: *const c_char,
    out: *mut *mut GnpmModelHandle,
) -> c_int {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return GNPM_ERR_NULL_ARG;
        }
        let path = match cstr_path(path) {
            Ok(p) => p,
            Err(c) => return c,
        };
        let ck = match Checkpoint::load(path) {
            Ok(c) => c,
            Err(e) => {
                set_error(&e.to_string());
                return GNPM_ERR_IO;
            }
        };
        let Some(cfg) = optim::config_from_checkpoint(&ck) else {
            set_error("checkpoint carries no readable config snapshot");
            return GNPM_ERR_RUNTIME;
        };
        let inner = match cfg.precision {
            Precision::F32 => match optim::load_model_bank::<f32>(&cfg, &ck) {
                Ok((m, b)) => ModelInner::F32(m, b),
                Err(e) => {
                    set_error(&e.to_string());
                    return GNPM_ERR_RUNTIME;
                }
            },
            Precision::F64 => match optim::load_model_bank::<f64>(&cfg, &ck) {
                Ok((m, b)) => ModelInner::F64(m, b),
                Err(e) => {
                    set_error(&e.to_string());
                    return GNPM_ERR_RUNTIME;
                }
            },
        };
        *out = Box::into_raw(Box::new(GnpmModelHandle { inner }));
        GNPM_OK
    })
}

/// # Safety
/// `h` must come from gnpm_model_load and not be freed twice. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn gnpm_model_free(h: *mut GnpmModelHandle) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

macro_rules! with_handle {
    ($h:expr, $name:ident, $bank:ident, $body:expr) => {{
        if $h.is_null() {
            set_error("null model handle");
            return GNPM_ERR_NULL_ARG;
        }
        match &(*$h).inner {
            ModelInner::F32($name, $bank) => $body,
            ModelInner::F64($name, $bank) => $body,
        }
    }};
}

/// # Safety
/// `h` must be a live handle; `dims` must point to 4 writable usizes,
/// receiving shape dim, pose dim, identity count, frame count.
#[no_mangle]
pub unsafe extern "C" fn gnpm_model_dims(h: *const GnpmModelHandle, dims: *mut usize) -> c_int {
    guard(|| {
        if dims.is_null() {
            set_error("null output pointer");
            return GNPM_ERR_NULL_ARG;
        }
        with_handle!(h, model, bank, {
            let out = std::slice::from_raw_parts_mut(dims, 4);
            out[0] = model.cfg.d_shape;
            out[1] = model.cfg.d_pose;
            out[2] = bank.identities();
            out[3] = bank.frames();
            GNPM_OK
        })
    })
}

/// Copy a trained latent code into `out`. `which` selects the bank: 0 shape
/// (length = shape dim), 1 pose (length = pose dim).
///
/// # Safety
/// `out` must hold the corresponding code length.
#[no_mangle]
pub unsafe extern "C" fn gnpm_model_code(
    h: *const GnpmModelHandle,
    which: c_int,
    index: usize,
    out: *mut c_double,
) -> c_int {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return GNPM_ERR_NULL_ARG;
        }
        with_handle!(h, model, bank, {
            use gnpm::tensor::Scalar;
            let code: Vec<f64> = match which {
                0 => {
                    if index >= bank.identities() {
                        set_error("shape code index out of range");
                        return GNPM_ERR_INVALID_ARG;
                    }
                    bank.shape_code(index).iter().map(|v| v.to_f64()).collect()
                }
                1 => {
                    if index >= bank.frames() {
                        set_error("pose code index out of range");
                        return GNPM_ERR_INVALID_ARG;
                    }
                    bank.pose_code(index).iter().map(|v| v.to_f64()).collect()
                }
                _ => {
                    set_error("code selector must be 0 (shape) or 1 (pose)");
                    return GNPM_ERR_INVALID_ARG;
                }
            };
            let _ = model;
            std::ptr::copy_nonoverlapping(code.as_ptr(), out, code.len());
            GNPM_OK
        })
    })
}

/// Re-pose a canonical cloud under the given shape and pose codes.
/// `points` is n*3 doubles, `shape_code`/`pose_code` have the model's code
/// dims, `out` receives n*3 doubles.
///
/// # Safety
/// All pointers must cover the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn gnpm_model_transfer(
    h: *const GnpmModelHandle,
    points: *const c_double,
    n: usize,
    shape_code: *const c_double,
    pose_code: *const c_double,
    out: *mut c_double,
) -> c_int {
    guard(|| {
        if points.is_null() || shape_code.is_null() || pose_code.is_null() || out.is_null() {
            set_error("null buffer argument");
            return GNPM_ERR_NULL_ARG;
        }
        with_handle!(h, model, bank, {
            use gnpm::tensor::Scalar;
            let _ = bank;
            if n <= model.cfg.k {
                set_error("point count must exceed the neighborhood size k");
                return GNPM_ERR_INVALID_ARG;
            }
            let pts = std::slice::from_raw_parts(points, n * 3);
            let s = std::slice::from_raw_parts(shape_code, model.cfg.d_shape);
            let p = std::slice::from_raw_parts(pose_code, model.cfg.d_pose);
            let pts_e: Vec<_> = pts.iter().map(|&v| Scalar::from_f64(v)).collect();
            let s_e: Vec<_> = s.iter().map(|&v| Scalar::from_f64(v)).collect();
            let p_e: Vec<_> = p.iter().map(|&v| Scalar::from_f64(v)).collect();
            match eval::transfer(model, &pts_e, n, &s_e, &p_e) {
                Ok(posed) => {
                    let outs = std::slice::from_raw_parts_mut(out, n * 3);
                    for (o, v) in outs.iter_mut().zip(posed.iter()) {
                        *o = v.to_f64();
                    }
                    GNPM_OK
                }
                Err(e) => {
                    set_error(&e.to_string());
                    GNPM_ERR_RUNTIME
                }
            }
        })
    })
}

/// Exact k nearest neighbors (self excluded, squared distances, ties to the
/// lower index). `points` is n*d doubles; `out_idx` and `out_dist2` receive
/// n*k entries.
///
/// # Safety
/// All pointers must cover the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn gnpm_knn(
    points: *const c_double,
    n: usize,
    d: usize,
    k: usize,
    out_idx: *mut usize,
    out_dist2: *mut c_double,
) -> c_int {
    guard(|| {
        if points.is_null() || out_idx.is_null() || out_dist2.is_null() {
            set_error("null buffer argument");
            return GNPM_ERR_NULL_ARG;
        }
        let pts = unsafe { std::slice::from_raw_parts(points, n * d) };
        match knn::knn_brute(pts, n, d, k) {
            Ok(g) => unsafe {
                std::ptr::copy_nonoverlapping(g.idx.as_ptr(), out_idx, n * k);
                std::ptr::copy_nonoverlapping(g.dist2.as_ptr(), out_dist2, n * k);
                GNPM_OK
            },
            Err(e) => {
                set_error(&e.to_string());
                GNPM_ERR_INVALID_ARG
            }
        }
    })
}

/// Symmetric Chamfer distance (squared-distance form) between two clouds of
/// 3-D points.
///
/// # Safety
/// `a` holds na*3 doubles, `b` nb*3, `out` one double.
#[no_mangle]
pub unsafe extern "C" fn gnpm_chamfer(
    a: *const c_double,
    na: usize,
    b: *const c_double,
    nb: usize,
    out: *mut c_double,
) -> c_int {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            set_error("null buffer argument");
            return GNPM_ERR_NULL_ARG;
        }
        let av = unsafe { std::slice::from_raw_parts(a, na * 3) };
        let bv = unsafe { std::slice::from_raw_parts(b, nb * 3) };
        match eval::chamfer_l2(av, bv) {
            Ok(v) => unsafe {
                *out = v;
                GNPM_OK
            },
            Err(e) => {
                set_error(&e.to_string());
                GNPM_ERR_INVALID_ARG
            }
        }
    })
}
