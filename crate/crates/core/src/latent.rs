//! Diagonal-Gaussian posteriors and the divergences the training objectives are built from.
//!
//! Variances are carried as log-variances. All multivariate divergences are sums of
//! independent per-dimension terms, so the batched row kernels below work on plain
//! slices and are shared by the value and gradient paths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    mean: Vec<f64>,
    log_var: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::invalid("latent dimension must be at least 1"));
        }
        if mean.len() != log_var.len() {
            return Err(Error::invalid(format!(
                "mean has length {} but log_var has length {}",
                mean.len(),
                log_var.len()
            )));
        }
        if !mean.iter().chain(&log_var).all(|v| v.is_finite()) {
            return Err(Error::invalid("gaussian parameters must be finite"));
        }
        Ok(Self { mean, log_var })
    }

    /// The prior N(0, I).
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub z: Vec<f64>,
}

/// Which symmetric divergence realizes the latent consistency term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JsImpl {
    /// Jensen-Shannon against the moment-matched Gaussian of the equal mixture.
    #[default]
    MomentMatched,
    /// `½KL(p‖q) + ½KL(q‖p)`.
    SymmetricKl,
}

fn same_dim(p: &DiagonalGaussian, q: &DiagonalGaussian) -> Result<()> {
    if p.dim() != q.dim() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            p.dim(),
            q.dim()
        )));
    }
    Ok(())
}

/// KL(dist ‖ N(0, I)).
pub fn kl_to_standard(dist: &DiagonalGaussian) -> Result<f64> {
    if !dist.mean.iter().chain(&dist.log_var).all(|v| v.is_finite()) {
        return Err(Error::invalid("gaussian parameters must be finite"));
    }
    Ok(kl_std_row(&dist.mean, &dist.log_var))
}

/// Closed-form KL(p ‖ q) between diagonal Gaussians.
pub fn kl_between(p: &DiagonalGaussian, q: &DiagonalGaussian) -> Result<f64> {
    same_dim(p, q)?;
    Ok(p.mean
        .iter()
        .zip(&p.log_var)
        .zip(q.mean.iter().zip(&q.log_var))
        .map(|((&mp, &lp), (&mq, &lq))| kl_1d(mp, lp, mq, lq))
        .sum())
}

fn kl_1d(mp: f64, lp: f64, mq: f64, lq: f64) -> f64 {
    let d = mp - mq;
    0.5 * (lq - lp + (lp.exp() + d * d) / lq.exp() - 1.0)
}

/// Gaussian with the mean and per-dimension variance of the equal-weight mixture of `p` and `q`.
pub fn moment_matched_mixture(p: &DiagonalGaussian, q: &DiagonalGaussian) -> Result<DiagonalGaussian> {
    same_dim(p, q)?;
    let mut mean = Vec::with_capacity(p.dim());
    let mut log_var = Vec::with_capacity(p.dim());
    for d in 0..p.dim() {
        let (mp, mq) = (p.mean[d], q.mean[d]);
        let (vp, vq) = (p.log_var[d].exp(), q.log_var[d].exp());
        let m = 0.5 * (mp + mq);
        let second_moment = 0.5 * (vp + mp * mp) + 0.5 * (vq + mq * mq);
        mean.push(m);
        log_var.push((second_moment - m * m).ln());
    }
    DiagonalGaussian::new(mean, log_var)
}

/// Jensen-Shannon divergence approximated through the moment-matched mixture `M`:
/// `½KL(p‖M) + ½KL(q‖M)`.
pub fn js_between(p: &DiagonalGaussian, q: &DiagonalGaussian) -> Result<f64> {
    let m = moment_matched_mixture(p, q)?;
    Ok(0.5 * kl_between(p, &m)? + 0.5 * kl_between(q, &m)?)
}

pub fn symmetric_kl(p: &DiagonalGaussian, q: &DiagonalGaussian) -> Result<f64> {
    Ok(0.5 * kl_between(p, q)? + 0.5 * kl_between(q, p)?)
}

pub fn consistency_divergence(
    imp: JsImpl,
    p: &DiagonalGaussian,
    q: &DiagonalGaussian,
) -> Result<f64> {
    match imp {
        JsImpl::MomentMatched => js_between(p, q),
        JsImpl::SymmetricKl => symmetric_kl(p, q),
    }
}

/// `z = mean + exp(½·log_var) ⊙ noise`.
pub fn reparameterize(dist: &DiagonalGaussian, noise: &[f64]) -> Result<LatentSample> {
    if noise.len() != dist.dim() {
        return Err(Error::invalid(format!(
            "noise has length {} but the latent dimension is {}",
            noise.len(),
            dist.dim()
        )));
    }
    let z = dist
        .mean
        .iter()
        .zip(&dist.log_var)
        .zip(noise)
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect();
    Ok(LatentSample { z })
}

/// Pulls `dz` back through the reparameterization: returns `(d_mean, d_log_var)`.
pub fn reparameterize_backward(
    dist: &DiagonalGaussian,
    noise: &[f64],
    dz: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if noise.len() != dist.dim() || dz.len() != dist.dim() {
        return Err(Error::invalid("noise/gradient length must match latent dimension"));
    }
    let d_lv = dist
        .log_var
        .iter()
        .zip(noise)
        .zip(dz)
        .map(|((&lv, &e), &g)| g * 0.5 * (0.5 * lv).exp() * e)
        .collect();
    Ok((dz.to_vec(), d_lv))
}

// ---------------------------------------------------------------------------
// Row kernels over raw slices, used by the batched loss code.

pub(crate) fn kl_std_row<T: Real>(mean: &[T], log_var: &[T]) -> f64 {
    mean.iter()
        .zip(log_var)
        .map(|(&m, &lv)| {
            let (m, lv) = (m.f64(), lv.f64());
            0.5 * (lv.exp() + m * m - 1.0 - lv)
        })
        .sum()
}

pub(crate) fn kl_std_row_grad<T: Real>(
    mean: &[T],
    log_var: &[T],
    scale: f64,
    d_mean: &mut [T],
    d_log_var: &mut [T],
) {
    for d in 0..mean.len() {
        d_mean[d] += T::c(scale * mean[d].f64());
        d_log_var[d] += T::c(scale * 0.5 * (log_var[d].f64().exp() - 1.0));
    }
}

// With s = ½(v1+v2) + ¼(m1−m2)², the moment-matched JS collapses per dimension to
// ½·ln s − ¼(lv1 + lv2).
pub(crate) fn js_row<T: Real>(m1: &[T], lv1: &[T], m2: &[T], lv2: &[T]) -> f64 {
    let mut acc = 0.0;
    for d in 0..m1.len() {
        let (a, la, b, lb) = (m1[d].f64(), lv1[d].f64(), m2[d].f64(), lv2[d].f64());
        let delta = a - b;
        let s = 0.5 * (la.exp() + lb.exp()) + 0.25 * delta * delta;
        acc += 0.5 * s.ln() - 0.25 * (la + lb);
    }
    acc
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn js_row_grad<T: Real>(
    m1: &[T],
    lv1: &[T],
    m2: &[T],
    lv2: &[T],
    scale: f64,
    d_m1: &mut [T],
    d_lv1: &mut [T],
    d_m2: &mut [T],
    d_lv2: &mut [T],
) {
    for d in 0..m1.len() {
        let (a, la, b, lb) = (m1[d].f64(), lv1[d].f64(), m2[d].f64(), lv2[d].f64());
        let (va, vb) = (la.exp(), lb.exp());
        let delta = a - b;
        let s = 0.5 * (va + vb) + 0.25 * delta * delta;
        let g_mean = scale * delta / (4.0 * s);
        d_m1[d] += T::c(g_mean);
        d_m2[d] -= T::c(g_mean);
        d_lv1[d] += T::c(scale * (va / (4.0 * s) - 0.25));
        d_lv2[d] += T::c(scale * (vb / (4.0 * s) - 0.25));
    }
}

// ½KL(p‖q) + ½KL(q‖p) = ¼ Σ [(v1+δ²)/v2 + (v2+δ²)/v1 − 2].
pub(crate) fn sym_kl_row<T: Real>(m1: &[T], lv1: &[T], m2: &[T], lv2: &[T]) -> f64 {
    let mut acc = 0.0;
    for d in 0..m1.len() {
        let (a, la, b, lb) = (m1[d].f64(), lv1[d].f64(), m2[d].f64(), lv2[d].f64());
        let (va, vb) = (la.exp(), lb.exp());
        let d2 = (a - b) * (a - b);
        acc += 0.25 * ((va + d2) / vb + (vb + d2) / va - 2.0);
    }
    acc
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn sym_kl_row_grad<T: Real>(
    m1: &[T],
    lv1: &[T],
    m2: &[T],
    lv2: &[T],
    scale: f64,
    d_m1: &mut [T],
    d_lv1: &mut [T],
    d_m2: &mut [T],
    d_lv2: &mut [T],
) {
    for d in 0..m1.len() {
        let (a, la, b, lb) = (m1[d].f64(), lv1[d].f64(), m2[d].f64(), lv2[d].f64());
        let (va, vb) = (la.exp(), lb.exp());
        let delta = a - b;
        let d2 = delta * delta;
        let g_mean = scale * 0.5 * delta * (1.0 / va + 1.0 / vb);
        d_m1[d] += T::c(g_mean);
        d_m2[d] -= T::c(g_mean);
        d_lv1[d] += T::c(scale * 0.25 * (va / vb - (vb + d2) / va));
        d_lv2[d] += T::c(scale * 0.25 * (vb / va - (va + d2) / vb));
    }
}

/// Per-sample posteriors for a batch: `mean` and `log_var` are both `N × D`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBatch<T> {
    pub mean: Tensor<T>,
    pub log_var: Tensor<T>,
}

impl<T: Real> GaussianBatch<T> {
    pub fn new(mean: Tensor<T>, log_var: Tensor<T>) -> Result<Self> {
        let (n, d) = mean.dims2()?;
        if log_var.shape() != [n, d] {
            return Err(Error::shape(format!(
                "mean {:?} and log_var {:?} differ in shape",
                mean.shape(),
                log_var.shape()
            )));
        }
        Ok(Self { mean, log_var })
    }

    pub fn batch(&self) -> usize {
        self.mean.batch()
    }

    pub fn dim(&self) -> usize {
        self.mean.row_len()
    }

    pub fn sample(&self, i: usize) -> Result<DiagonalGaussian> {
        DiagonalGaussian::new(
            self.mean.row(i).iter().map(|v| v.f64()).collect(),
            self.log_var.row(i).iter().map(|v| v.f64()).collect(),
        )
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            mean: Tensor::zeros(self.mean.shape()),
            log_var: Tensor::zeros(self.log_var.shape()),
        }
    }

    /// Batched reparameterization with explicit standard-normal `noise` (`N × D`).
    pub fn reparameterize(&self, noise: &Tensor<T>) -> Result<Tensor<T>> {
        if noise.shape() != self.mean.shape() {
            return Err(Error::invalid(format!(
                "noise shape {:?} does not match posterior shape {:?}",
                noise.shape(),
                self.mean.shape()
            )));
        }
        let data = self
            .mean
            .data()
            .iter()
            .zip(self.log_var.data())
            .zip(noise.data())
            .map(|((&m, &lv), &e)| m + (T::c(0.5) * lv).exp() * e)
            .collect();
        Tensor::from_vec(self.mean.shape(), data)
    }

    /// Adds the pull-back of `dz` into `grad` (same layout as `self`).
    pub fn reparameterize_backward(&self, noise: &Tensor<T>, dz: &Tensor<T>, grad: &mut Self) {
        let lv = self.log_var.data();
        let e = noise.data();
        let g = dz.data();
        for (i, (dm, dl)) in grad
            .mean
            .data_mut()
            .iter_mut()
            .zip(grad.log_var.data_mut().iter_mut())
            .enumerate()
        {
            *dm += g[i];
            *dl += g[i] * T::c(0.5) * (T::c(0.5) * lv[i]).exp() * e[i];
        }
    }
}
