//! C ABI over `matchattn`.
//!
//! Objects are opaque handles created by `*_new`/`*_load` and released by
//! the matching `*_free`. Every fallible call returns an [`MaStatus`]; on
//! failure `ma_last_error` describes the most recent error on the calling
//! thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use matchattn::bsm::bilinear_softmax_forward;
use matchattn::checkpoint::load_checkpoint;
use matchattn::decoder::{reference_view, stack_views, DecoderConfig};
use matchattn::harness::flops::flops_count;
use matchattn::params::ParamStore;
use matchattn::train::predict;
use matchattn::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    NonFinite = 4,
    Io = 5,
    Format = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Dense row-major array of doubles.
pub struct MaTensor {
    inner: Tensor,
}

/// Decoder weights and configuration loaded from a checkpoint.
pub struct MaModel {
    store: ParamStore,
    config: DecoderConfig,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MaFlops {
    pub qk_flops: u64,
    pub bsm_flops: u64,
    pub agg_flops: u64,
    pub tensor_flops: u64,
    pub attn_memory: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = s);
}

fn status_of(e: &Error) -> MaStatus {
    match e {
        Error::Shape { .. } => MaStatus::ShapeMismatch,
        Error::NonFinite { .. } | Error::Diverged { .. } => MaStatus::NonFinite,
        Error::Io { .. } => MaStatus::Io,
        Error::Format { .. } => MaStatus::Format,
        _ => MaStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (MaStatus, String)>) -> MaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MaStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            MaStatus::Panic
        }
    }
}

fn lift<T>(r: matchattn::Result<T>) -> Result<T, (MaStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (MaStatus, String) {
    (MaStatus::NullPointer, format!("{what} is null"))
}

/// Message of the last failed call on this thread. Valid until the next
/// call into this library from the same thread.
#[no_mangle]
pub extern "C" fn ma_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ma_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies `data` (product of `shape` values) into a new tensor.
///
/// # Safety
/// `shape` must point to `rank` extents and `data` to as many doubles as
/// their product; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ma_tensor_new(shape: *const usize, rank: usize, data: *const f64, out: *mut *mut MaTensor) -> MaStatus {
    guard(|| {
        if shape.is_null() || out.is_null() || (data.is_null() && rank > 0) {
            return Err(null("shape, data or out"));
        }
        let dims = std::slice::from_raw_parts(shape, rank).to_vec();
        let n: usize = dims.iter().product();
        let values = if n == 0 { Vec::new() } else { std::slice::from_raw_parts(data, n).to_vec() };
        let t = lift(Tensor::new(dims, values))?;
        *out = Box::into_raw(Box::new(MaTensor { inner: t }));
        Ok(())
    })
}

/// # Safety
/// `t` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ma_tensor_free(t: *mut MaTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Number of axes, or 0 for a null handle.
///
/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn ma_tensor_rank(t: *const MaTensor) -> usize {
    t.as_ref().map_or(0, |t| t.inner.rank())
}

/// Number of elements, or 0 for a null handle.
///
/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn ma_tensor_len(t: *const MaTensor) -> usize {
    t.as_ref().map_or(0, |t| t.inner.len())
}

/// Writes the extents into `out` (capacity `cap`).
///
/// # Safety
/// `t` must be a live tensor handle and `out` writable for `cap` values.
#[no_mangle]
pub unsafe extern "C" fn ma_tensor_shape(t: *const MaTensor, out: *mut usize, cap: usize) -> MaStatus {
    guard(|| {
        let t = t.as_ref().ok_or_else(|| null("tensor"))?;
        copy_out(t.inner.shape(), out, cap)
    })
}

/// Writes the values into `out` (capacity `cap`).
///
/// # Safety
/// `t` must be a live tensor handle and `out` writable for `cap` values.
#[no_mangle]
pub unsafe extern "C" fn ma_tensor_data(t: *const MaTensor, out: *mut f64, cap: usize) -> MaStatus {
    guard(|| {
        let t = t.as_ref().ok_or_else(|| null("tensor"))?;
        copy_out(t.inner.data(), out, cap)
    })
}

unsafe fn copy_out<T: Copy>(src: &[T], out: *mut T, cap: usize) -> Result<(), (MaStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    if cap < src.len() {
        return Err((MaStatus::BufferTooSmall, format!("need {} values, have {cap}", src.len())));
    }
    std::ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    Ok(())
}

/// Closed-form cost of one MatchAttention layer over an `h x w` map.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ma_flops_count(h: u64, w: u64, heads: u64, ck: u64, cv: u64, window: u64, out: *mut MaFlops) -> MaStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if [h, w, heads, ck, cv, window].contains(&0) {
            return Err((MaStatus::InvalidArgument, "extents must be positive".into()));
        }
        let b = flops_count(h, w, heads, ck, cv, window);
        *out = MaFlops {
            qk_flops: b.qk_flops,
            bsm_flops: b.bsm_flops,
            agg_flops: b.agg_flops,
            tensor_flops: b.tensor_flops,
            attn_memory: b.attn_memory,
        };
        Ok(())
    })
}

/// Attention weights over the `(window+1)^2` expanded window for
/// similarities `sim` and fractional offset `(fx, fy)` in `[0, 1)`.
///
/// # Safety
/// `sim` and `out` must each hold `(window+1)^2` doubles.
#[no_mangle]
pub unsafe extern "C" fn ma_bilinear_softmax(sim: *const f64, window: usize, fx: f64, fy: f64, out: *mut f64) -> MaStatus {
    guard(|| {
        if sim.is_null() || out.is_null() {
            return Err(null("sim or out"));
        }
        let n = (window + 1) * (window + 1);
        let s = std::slice::from_raw_parts(sim, n);
        let a = lift(bilinear_softmax_forward(s, (fx, fy), window))?;
        std::ptr::copy_nonoverlapping(a.weights.as_ptr(), out, n);
        Ok(())
    })
}

/// Loads a checkpoint written by `matchattn train-toy`.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ma_model_load(path: *const c_char, out: *mut *mut MaModel) -> MaStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(null("path or out"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (MaStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let (store, config) = lift(load_checkpoint(Path::new(p)))?;
        *out = Box::into_raw(Box::new(MaModel { store, config }));
        Ok(())
    })
}

/// # Safety
/// `m` must come from `ma_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ma_model_free(m: *mut MaModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Predicts the reference-view relative positions `[H, W, 2]` from two
/// `[H, W, 3]` images with values in `[0, 1]`.
///
/// # Safety
/// All handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ma_model_infer(m: *const MaModel, left: *const MaTensor, right: *const MaTensor, out: *mut *mut MaTensor) -> MaStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("model"))?;
        let (l, r) = match (left.as_ref(), right.as_ref()) {
            (Some(l), Some(r)) => (l, r),
            _ => return Err(null("image")),
        };
        if out.is_null() {
            return Err(null("out"));
        }
        let images = lift(stack_views(&l.inner, &r.inner))?;
        let (rp, _) = lift(predict(&m.store, &m.config, &images))?;
        let r0 = lift(reference_view(&rp))?;
        *out = Box::into_raw(Box::new(MaTensor { inner: r0 }));
        Ok(())
    })
}
