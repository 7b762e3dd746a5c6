//! C ABI over the `rscvae` toolkit.
//!
//! Every entry point returns an [`RscvaeStatus`]; on failure a message for the calling
//! thread is available from [`rscvae_last_error`]. Models and parsed IDX tensors are
//! opaque handles that the caller releases with the matching `*_free` function.
//! Panics never cross the boundary; they surface as [`RscvaeStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use rscvae::checkpoint;
use rscvae::datasets::{parse_idx, IdxTensor};
use rscvae::latent::{js_between, kl_between, DiagonalGaussian, JsImpl};
use rscvae::losses::{mut_loss, recon_loss};
use rscvae::networks::Vae;
use rscvae::scoring::{auroc, score_terms, NormConstants};
use rscvae::tensor::Tensor;
use rscvae::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RscvaeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Shape = 3,
    Parse = 4,
    Io = 5,
    Checkpoint = 6,
    NonFinite = 7,
    Config = 8,
    Data = 9,
    Panic = 10,
}

impl From<&Error> for RscvaeStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidInput(_) => RscvaeStatus::InvalidInput,
            Error::Shape(_) => RscvaeStatus::Shape,
            Error::Parse { .. } => RscvaeStatus::Parse,
            Error::Io { .. } => RscvaeStatus::Io,
            Error::Checkpoint(_) => RscvaeStatus::Checkpoint,
            Error::NonFinite(_) => RscvaeStatus::NonFinite,
            Error::Config { .. } => RscvaeStatus::Config,
            Error::Structure(_) | Error::Image { .. } => RscvaeStatus::Data,
        }
    }
}

/// A trained model loaded from a checkpoint.
pub struct RscvaeModel {
    vae: Vae<f32>,
    js: JsImpl,
}

/// A decoded IDX tensor.
pub struct RscvaeIdx {
    tensor: IdxTensor,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).unwrap_or_default());
}

struct Fail(RscvaeStatus);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        set_error(e.to_string());
        Fail(RscvaeStatus::from(&e))
    }
}

fn null(what: &str) -> Fail {
    set_error(format!("{what} is null"));
    Fail(RscvaeStatus::NullPointer)
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RscvaeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            RscvaeStatus::Ok
        }
        Ok(Err(Fail(s))) => s,
        Err(_) => {
            set_error("internal panic");
            RscvaeStatus::Panic
        }
    }
}

/// # Safety
/// A non-null `p` must point to `n` readable values.
unsafe fn input<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

/// # Safety
/// A non-null `p` must point to `n` writable values.
unsafe fn output<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, n))
}

/// Message describing the last failure on this thread, or an empty string. The pointer
/// stays valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn rscvae_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint file into a new model handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer to write to.
#[no_mangle]
pub unsafe extern "C" fn rscvae_model_load(path: *const c_char, out: *mut *mut RscvaeModel) -> RscvaeStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Error::invalid("path is not valid UTF-8"))?;
        let ck = checkpoint::load::<f32>(Path::new(path))?;
        let js = ck.config.map(|c| c.js_impl).unwrap_or_default();
        *out = Box::into_raw(Box::new(RscvaeModel { vae: ck.model, js }));
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`rscvae_model_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn rscvae_model_free(model: *mut RscvaeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Latent dimension of the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rscvae_model_latent_dim(model: *const RscvaeModel) -> usize {
    model.as_ref().map_or(0, |m| m.vae.latent_dim())
}

/// Writes the expected image shape (channels, height, width).
///
/// # Safety
/// `model` must be a live handle; the outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn rscvae_model_input_shape(
    model: *const RscvaeModel,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> RscvaeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if channels.is_null() || height.is_null() || width.is_null() {
            return Err(null("shape output"));
        }
        let (c, h, w) = m.vae.input_shape();
        *channels = c;
        *height = h;
        *width = w;
        Ok(())
    })
}

fn image_batch(m: &RscvaeModel, images: &[f32], n: usize) -> Result<Tensor<f32>, Fail> {
    let (c, h, w) = m.vae.input_shape();
    Ok(Tensor::from_vec(&[n, c, h, w], images.to_vec())?)
}

/// Per-image `mut` (latent divergence between encoding and recoding) and `recon`
/// (mean absolute pixel error) for `n` images laid out as `n × C × H × W` floats in [0, 1].
///
/// # Safety
/// `images` must hold `n·C·H·W` floats; `mut_out` and `recon_out` must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn rscvae_model_terms(
    model: *const RscvaeModel,
    images: *const f32,
    n: usize,
    mut_out: *mut f64,
    recon_out: *mut f64,
) -> RscvaeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if n == 0 {
            return Ok(());
        }
        let (c, h, w) = m.vae.input_shape();
        let x = image_batch(m, input(images, n * c * h * w, "images")?, n)?;
        let mo = output(mut_out, n, "mut_out")?;
        let ro = output(recon_out, n, "recon_out")?;
        let trace = m.vae.infer(&x)?;
        mo.copy_from_slice(&mut_loss(&trace, m.js));
        ro.copy_from_slice(&recon_loss(&trace.x, &trace.x_hat)?);
        Ok(())
    })
}

/// Posterior means, `n × D` floats.
///
/// # Safety
/// `images` must hold `n·C·H·W` floats and `mean_out` `n·D` floats.
#[no_mangle]
pub unsafe extern "C" fn rscvae_model_encode(
    model: *const RscvaeModel,
    images: *const f32,
    n: usize,
    mean_out: *mut f32,
) -> RscvaeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if n == 0 {
            return Ok(());
        }
        let (c, h, w) = m.vae.input_shape();
        let x = image_batch(m, input(images, n * c * h * w, "images")?, n)?;
        let out = output(mean_out, n * m.vae.latent_dim(), "mean_out")?;
        let q = m.vae.encoder.encode(&x)?;
        out.copy_from_slice(q.mean.data());
        Ok(())
    })
}

/// `s = α·mut/E_mut + (1−α)·recon/E_recon` for `n` samples.
///
/// # Safety
/// `mut_terms`, `recon_terms` and `out` must each hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn rscvae_score(
    mut_terms: *const f64,
    recon_terms: *const f64,
    n: usize,
    alpha: f64,
    e_mut: f64,
    e_recon: f64,
    out: *mut f64,
) -> RscvaeStatus {
    guard(|| {
        let m = input(mut_terms, n, "mut_terms")?;
        let r = input(recon_terms, n, "recon_terms")?;
        let o = output(out, n, "out")?;
        let s = score_terms(m, r, NormConstants { e_mut, e_recon }, alpha)?;
        o.copy_from_slice(&s);
        Ok(())
    })
}

/// AUROC of `scores` against 0/1 `labels` (1 = anomalous), ties counted one half.
///
/// # Safety
/// `scores` and `labels` must hold `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rscvae_auroc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> RscvaeStatus {
    guard(|| {
        let s = input(scores, n, "scores")?;
        let l = input(labels, n, "labels")?;
        let o = output(out, 1, "out")?;
        o[0] = auroc(s, l)?;
        Ok(())
    })
}

unsafe fn gaussian(mean: *const f64, log_var: *const f64, dim: usize) -> Result<DiagonalGaussian, Fail> {
    let m = input(mean, dim, "mean")?;
    let l = input(log_var, dim, "log_var")?;
    Ok(DiagonalGaussian::new(m.to_vec(), l.to_vec())?)
}

/// Closed-form KL(p ‖ q) between diagonal Gaussians of dimension `dim`.
///
/// # Safety
/// Each parameter array must hold `dim` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rscvae_kl_between(
    p_mean: *const f64,
    p_log_var: *const f64,
    q_mean: *const f64,
    q_log_var: *const f64,
    dim: usize,
    out: *mut f64,
) -> RscvaeStatus {
    guard(|| {
        let p = gaussian(p_mean, p_log_var, dim)?;
        let q = gaussian(q_mean, q_log_var, dim)?;
        output(out, 1, "out")?[0] = kl_between(&p, &q)?;
        Ok(())
    })
}

/// Moment-matched Jensen-Shannon divergence between diagonal Gaussians.
///
/// # Safety
/// Each parameter array must hold `dim` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rscvae_js_between(
    p_mean: *const f64,
    p_log_var: *const f64,
    q_mean: *const f64,
    q_log_var: *const f64,
    dim: usize,
    out: *mut f64,
) -> RscvaeStatus {
    guard(|| {
        let p = gaussian(p_mean, p_log_var, dim)?;
        let q = gaussian(q_mean, q_log_var, dim)?;
        output(out, 1, "out")?[0] = js_between(&p, &q)?;
        Ok(())
    })
}

/// Parses an in-memory IDX file into a new handle.
///
/// # Safety
/// `bytes` must hold `len` bytes and `out` must be a valid pointer to write to.
#[no_mangle]
pub unsafe extern "C" fn rscvae_idx_parse(bytes: *const u8, len: usize, out: *mut *mut RscvaeIdx) -> RscvaeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let b = input(bytes, len, "bytes")?;
        let tensor = parse_idx(b)?;
        *out = Box::into_raw(Box::new(RscvaeIdx { tensor }));
        Ok(())
    })
}

/// Rank of a parsed tensor, or 0 for null.
///
/// # Safety
/// `idx` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rscvae_idx_rank(idx: *const RscvaeIdx) -> usize {
    idx.as_ref().map_or(0, |t| t.tensor.dims.len())
}

/// Pointer to the `rank` dimension sizes, valid while the handle lives.
///
/// # Safety
/// `idx` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rscvae_idx_dims(idx: *const RscvaeIdx) -> *const usize {
    idx.as_ref().map_or(ptr::null(), |t| t.tensor.dims.as_ptr())
}

/// Number of elements in a parsed tensor, or 0 for null.
///
/// # Safety
/// `idx` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rscvae_idx_len(idx: *const RscvaeIdx) -> usize {
    idx.as_ref().map_or(0, |t| t.tensor.data.len())
}

/// Pointer to the decoded values (unsigned bytes scaled to [0, 1]), valid while the
/// handle lives.
///
/// # Safety
/// `idx` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rscvae_idx_data(idx: *const RscvaeIdx) -> *const f64 {
    idx.as_ref().map_or(ptr::null(), |t| t.tensor.data.as_ptr())
}

/// Releases a parsed tensor. Null is ignored.
///
/// # Safety
/// `idx` must come from [`rscvae_idx_parse`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn rscvae_idx_free(idx: *mut RscvaeIdx) {
    if !idx.is_null() {
        drop(Box::from_raw(idx));
    }
}
