//! C ABI over `sslab`.
//!
//! Objects cross the boundary as opaque handles (`SslTensor`, `SslModel`)
//! that the caller releases with the matching `*_free` function. Every
//! fallible function returns an `SslStatus`; on failure a description is
//! kept per thread and can be read with `ssl_last_error_message`. Panics
//! never unwind into C: they are caught and reported as `SSL_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use sslab::model::DeskNet;
use sslab::sparsity::{self, TopKConfig, Variant};
use sslab::{eval, viz, Error, Tensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SslStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    NonFinite = 4,
    Io = 5,
    Format = 6,
    UndefinedBias = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Top-K variant selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SslVariant {
    Hard = 0,
    MeanReplacement = 1,
}

impl From<SslVariant> for Variant {
    fn from(v: SslVariant) -> Self {
        match v {
            SslVariant::Hard => Variant::Hard,
            SslVariant::MeanReplacement => Variant::MeanReplacement,
        }
    }
}

/// Dense f64 tensor.
pub struct SslTensor(Tensor<f64>);

/// Trained classifier loaded from an SSLM checkpoint.
pub struct SslModel(DeskNet<f32>);

/// Cue-conflict decision counts and bias ratios.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SslBiasReport {
    pub n_total: usize,
    pub n_correct_shape: usize,
    pub n_correct_texture: usize,
    pub n_other: usize,
    pub shape_bias: f64,
    pub texture_bias: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> SslStatus {
    match e {
        Error::ShapeMismatch { .. } => SslStatus::ShapeMismatch,
        Error::NonFinite { .. } => SslStatus::NonFinite,
        Error::InvalidArgument(_) => SslStatus::InvalidArgument,
        Error::UndefinedBias => SslStatus::UndefinedBias,
        Error::Format { .. } | Error::ImageDecode { .. } => SslStatus::Format,
        Error::Io { .. } => SslStatus::Io,
    }
}

struct Fail(SslStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SslStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SslStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            SslStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SslStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller guarantees `p` points to `len` readable elements.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

unsafe fn out_slice<'a, T>(p: *mut T, cap: usize, need: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if cap < need {
        return Err(Fail(
            SslStatus::BufferTooSmall,
            format!("{what} holds {cap} elements, {need} needed"),
        ));
    }
    if need == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller guarantees `p` points to `cap >= need` writable elements.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, need) })
}

unsafe fn tensor_ref<'a>(t: *const SslTensor) -> Result<&'a Tensor<f64>, Fail> {
    // SAFETY: non-null handles come from `Box::into_raw` in this crate.
    unsafe { t.as_ref() }.map(|t| &t.0).ok_or_else(|| null("tensor"))
}

fn emit(out: *mut *mut SslTensor, t: Tensor<f64>) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    // SAFETY: `out` is non-null and points to writable handle storage.
    unsafe { *out = Box::into_raw(Box::new(SslTensor(t))) };
    Ok(())
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `cap - 1` bytes). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ssl_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            // SAFETY: caller guarantees `cap` writable bytes at `buf`.
            unsafe {
                ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n) = 0;
            }
        }
        msg.len()
    })
}

/// Creates a tensor from `rank` extents and `prod(shape)` row-major values.
///
/// # Safety
/// `shape` must point to `rank` values, `data` to `prod(shape)` values and
/// `out` to writable handle storage.
#[no_mangle]
pub unsafe extern "C" fn ssl_tensor_new(
    shape: *const usize,
    rank: usize,
    data: *const f64,
    out: *mut *mut SslTensor,
) -> SslStatus {
    guard(|| {
        let shape = unsafe { slice(shape, rank, "shape") }?.to_vec();
        let n: usize = shape.iter().product();
        let data = unsafe { slice(data, n, "data") }?.to_vec();
        emit(out, Tensor::new(shape, data)?)
    })
}

/// Releases a tensor. Null is ignored.
///
/// # Safety
/// `t` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn ssl_tensor_free(t: *mut SslTensor) {
    if !t.is_null() {
        // SAFETY: handle originated from `Box::into_raw`.
        drop(unsafe { Box::from_raw(t) });
    }
}

/// Number of dimensions, or 0 for a null handle.
///
/// # Safety
/// `t` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ssl_tensor_rank(t: *const SslTensor) -> usize {
    unsafe { tensor_ref(t) }.map_or(0, |t| t.rank())
}

/// Number of elements, or 0 for a null handle.
///
/// # Safety
/// `t` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ssl_tensor_numel(t: *const SslTensor) -> usize {
    unsafe { tensor_ref(t) }.map_or(0, |t| t.numel())
}

/// Copies the extents into `out` (capacity `cap`).
///
/// # Safety
/// `t` must be a live handle and `out` point to `cap` writable values.
#[no_mangle]
pub unsafe extern "C" fn ssl_tensor_shape(t: *const SslTensor, out: *mut usize, cap: usize) -> SslStatus {
    guard(|| {
        let t = unsafe { tensor_ref(t) }?;
        unsafe { out_slice(out, cap, t.rank(), "shape buffer") }?.copy_from_slice(t.shape());
        Ok(())
    })
}

/// Copies the values into `out` (capacity `cap`).
///
/// # Safety
/// `t` must be a live handle and `out` point to `cap` writable values.
#[no_mangle]
pub unsafe extern "C" fn ssl_tensor_data(t: *const SslTensor, out: *mut f64, cap: usize) -> SslStatus {
    guard(|| {
        let t = unsafe { tensor_ref(t) }?;
        unsafe { out_slice(out, cap, t.numel(), "data buffer") }?.copy_from_slice(t.data());
        Ok(())
    })
}

/// Kept count per channel: `max(1, ceil(fraction·h·w))`.
///
/// # Safety
/// `out` must point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn ssl_resolve_k(fraction: f64, h: usize, w: usize, out: *mut usize) -> SslStatus {
    guard(|| {
        TopKConfig::hard(fraction)?;
        if h == 0 || w == 0 {
            return Err(Fail(SslStatus::InvalidArgument, "empty plane".into()));
        }
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("output"))?;
        *out = sparsity::resolve_k(fraction, h, w);
        Ok(())
    })
}

/// Per-channel spatial Top-K of a `[c,h,w]` or `[n,c,h,w]` tensor. Writes
/// the sparsified tensor and a 0/1 mask of the same shape.
///
/// # Safety
/// `x` must be a live handle; `out_y` and `out_mask` writable handle storage.
#[no_mangle]
pub unsafe extern "C" fn ssl_topk_forward(
    x: *const SslTensor,
    fraction: f64,
    variant: SslVariant,
    out_y: *mut *mut SslTensor,
    out_mask: *mut *mut SslTensor,
) -> SslStatus {
    guard(|| {
        let x = unsafe { tensor_ref(x) }?;
        if out_y.is_null() || out_mask.is_null() {
            return Err(null("output handle"));
        }
        let cfg = TopKConfig::new(fraction, variant.into())?;
        let (y, mask) = sparsity::topk_forward(x, &cfg)?;
        emit(out_y, y)?;
        emit(out_mask, mask.to_tensor())
    })
}

/// Normalized Gram matrix `(1/(h·w))·X·Xᵀ` of a `[c,h,w]` tensor.
///
/// # Safety
/// `x` must be a live handle; `out` writable handle storage.
#[no_mangle]
pub unsafe extern "C" fn ssl_gram(x: *const SslTensor, out: *mut *mut SslTensor) -> SslStatus {
    guard(|| {
        let x = unsafe { tensor_ref(x) }?;
        emit(out, viz::gram(x)?)
    })
}

/// Largest 4-connected component of a binary `h×w` plane (nonzero bytes
/// are set) divided by the number of set cells.
///
/// # Safety
/// `bits` must point to `h·w` bytes; `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn ssl_connectivity(bits: *const u8, h: usize, w: usize, out: *mut f64) -> SslStatus {
    guard(|| {
        let plane: Vec<bool> = unsafe { slice(bits, h * w, "bits") }?.iter().map(|&b| b != 0).collect();
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("output"))?;
        *out = viz::connectivity(&plane, h, w)?;
        Ok(())
    })
}

/// Shape/texture bias of `n` cue-conflict predictions.
///
/// # Safety
/// The three arrays must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ssl_bias_scores(
    preds: *const usize,
    shape_labels: *const usize,
    texture_labels: *const usize,
    n: usize,
    out: *mut SslBiasReport,
) -> SslStatus {
    guard(|| {
        let p = unsafe { slice(preds, n, "preds") }?;
        let s = unsafe { slice(shape_labels, n, "shape_labels") }?;
        let t = unsafe { slice(texture_labels, n, "texture_labels") }?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("output"))?;
        let r = eval::bias_scores(p, s, t)?;
        *out = SslBiasReport {
            n_total: r.n_total,
            n_correct_shape: r.n_correct_shape,
            n_correct_texture: r.n_correct_texture,
            n_other: r.n_other,
            shape_bias: r.shape_bias,
            texture_bias: r.texture_bias,
        };
        Ok(())
    })
}

/// Loads an SSLM checkpoint from a NUL-terminated UTF-8 path.
///
/// # Safety
/// `path` must be a valid C string; `out` writable handle storage.
#[no_mangle]
pub unsafe extern "C" fn ssl_model_load(path: *const c_char, out: *mut *mut SslModel) -> SslStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("output handle"));
        }
        // SAFETY: caller guarantees a NUL-terminated string.
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| Fail(SslStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let model = DeskNet::load(PathBuf::from(path))?;
        // SAFETY: `out` checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(SslModel(model))) };
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `m` must be null or a live handle from `ssl_model_load`.
#[no_mangle]
pub unsafe extern "C" fn ssl_model_free(m: *mut SslModel) {
    if !m.is_null() {
        // SAFETY: handle originated from `Box::into_raw`.
        drop(unsafe { Box::from_raw(m) });
    }
}

/// Input side length expected by the model, or 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ssl_model_image_size(m: *const SslModel) -> usize {
    unsafe { m.as_ref() }.map_or(0, |m| m.0.arch().image_size)
}

/// Predicted class of each image in an `[n, 3, S, S]` tensor (values in
/// `[0, 1]`), written to `out` (capacity `cap`).
///
/// # Safety
/// `m` and `images` must be live handles; `out` must point to `cap` values.
#[no_mangle]
pub unsafe extern "C" fn ssl_model_classify(
    m: *const SslModel,
    images: *const SslTensor,
    out: *mut usize,
    cap: usize,
) -> SslStatus {
    guard(|| {
        let model = &unsafe { m.as_ref() }.ok_or_else(|| null("model"))?.0;
        let x = unsafe { tensor_ref(images) }?;
        let [n, c, h, w] = x.shape()[..] else {
            return Err(Fail(SslStatus::ShapeMismatch, format!("images must be [n,3,S,S], got {:?}", x.shape())));
        };
        let dst = unsafe { out_slice(out, cap, n, "prediction buffer") }?;
        let per = c * h * w;
        let imgs = x
            .data()
            .chunks_exact(per)
            .map(|d| Tensor::<f64>::new(vec![c, h, w], d.to_vec()).map(|t| t.cast::<f32>()))
            .collect::<Result<Vec<_>, _>>()?;
        dst.copy_from_slice(&eval::classify(model, &imgs)?);
        Ok(())
    })
}
