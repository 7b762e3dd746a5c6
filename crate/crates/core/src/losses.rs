//! Per-sample loss terms and the three batch objectives.
//!
//! Every term is computed per sample from a [`ForwardTrace`]:
//!
//! * `recon`: mean absolute error between the image and its reconstruction (the
//!   objective weights it by the pixel count unless the mean reduction is chosen),
//! * `enc1` / `enc2`: KL of the first encoding / the recoding to N(0, I),
//! * `mut`: symmetric divergence between the two encodings,
//! * `consist = enc2 + mut`.
//!
//! Normal samples are trained on `recon + enc1 + λ·consist`. Anomalous samples (DSA
//! pseudo-anomalies or real labelled anomalies) drop the reconstruction term and are
//! weighted by β: `β·(enc1 + λ·consist)`. Batch objectives are sums, accumulated in
//! ascending sample order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{js_row, js_row_grad, kl_std_row, kl_std_row_grad, sym_kl_row, sym_kl_row_grad, JsImpl};
use crate::networks::{ForwardTrace, TraceGrads};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_consist: f64,
    pub beta_anom: f64,
    #[serde(default)]
    pub recon_reduction: ReconReduction,
}

/// How the per-pixel absolute errors enter the training objective. The reported
/// `recon` term is always the per-pixel mean; `Sum` (the plain L1 norm) multiplies its
/// weight in the objective by the number of values per image. Under `Mean` the KL terms
/// outweigh reconstruction by that same factor and the posterior tends to collapse.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconReduction {
    Mean,
    #[default]
    Sum,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_consist: 0.1,
            beta_anom: 1.0,
            recon_reduction: ReconReduction::Sum,
        }
    }
}

impl LossWeights {
    /// Objective weight of the per-pixel mean `recon` term for images of `pixels` values.
    pub fn recon_weight(&self, pixels: usize) -> f64 {
        match self.recon_reduction {
            ReconReduction::Mean => 1.0,
            ReconReduction::Sum => pixels as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_consist", self.lambda_consist), ("beta_anom", self.beta_anom)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(name, format!("must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrainingMode {
    /// One-class: normals only.
    #[serde(rename = "o")]
    OneClass,
    /// Distributionally shifted: DSA pseudo-anomalies mixed into the batch.
    #[serde(rename = "d")]
    Shifted,
    /// Extremely imbalanced: a few real labelled anomalies in the training set.
    #[serde(rename = "e")]
    Imbalanced,
}

impl TrainingMode {
    pub fn code(self) -> &'static str {
        match self {
            TrainingMode::OneClass => "o",
            TrainingMode::Shifted => "d",
            TrainingMode::Imbalanced => "e",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Normal,
    PseudoAnomaly,
    RealAnomaly,
}

impl Role {
    pub fn is_anomalous(self) -> bool {
        self != Role::Normal
    }
}

pub fn check_roles(mode: TrainingMode, roles: &[Role]) -> Result<()> {
    let allowed = |r: Role| match mode {
        TrainingMode::OneClass => r == Role::Normal,
        TrainingMode::Shifted => r != Role::RealAnomaly,
        TrainingMode::Imbalanced => r != Role::PseudoAnomaly,
    };
    if let Some((i, r)) = roles.iter().enumerate().find(|(_, r)| !allowed(**r)) {
        return Err(Error::invalid(format!(
            "sample {i} has role {r:?}, which mode {} does not accept",
            mode.code()
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleTerms {
    pub recon: f64,
    pub enc1: f64,
    pub enc2: f64,
    #[serde(rename = "mut")]
    pub mut_: f64,
}

impl SampleTerms {
    pub fn consist(&self) -> f64 {
        self.enc2 + self.mut_
    }

    /// `recon + enc1` with `recon` weighted for images of `pixels` values.
    pub fn vae(&self, w: &LossWeights, pixels: usize) -> f64 {
        w.recon_weight(pixels) * self.recon + self.enc1
    }

    pub fn normal(&self, w: &LossWeights, pixels: usize) -> f64 {
        self.vae(w, pixels) + w.lambda_consist * self.consist()
    }

    /// `enc1 + λ·consist`; shared by pseudo-anomalies and real anomalies.
    pub fn anomalous(&self, w: &LossWeights) -> f64 {
        self.enc1 + w.lambda_consist * self.consist()
    }
}

/// Per-sample mean absolute error.
pub fn recon_loss<T: Real>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<Vec<f64>> {
    if x.shape() != x_hat.shape() {
        return Err(Error::invalid(format!(
            "reconstruction shape {:?} does not match input {:?}",
            x_hat.shape(),
            x.shape()
        )));
    }
    let per = x.row_len().max(1) as f64;
    Ok((0..x.batch())
        .map(|i| {
            x.row(i)
                .iter()
                .zip(x_hat.row(i))
                .map(|(&a, &b)| (a.f64() - b.f64()).abs())
                .sum::<f64>()
                / per
        })
        .collect())
}

pub fn enc1_loss<T: Real>(trace: &ForwardTrace<T>) -> Vec<f64> {
    (0..trace.batch())
        .map(|i| kl_std_row(trace.q1.mean.row(i), trace.q1.log_var.row(i)))
        .collect()
}

pub fn enc2_loss<T: Real>(trace: &ForwardTrace<T>) -> Vec<f64> {
    (0..trace.batch())
        .map(|i| kl_std_row(trace.q2.mean.row(i), trace.q2.log_var.row(i)))
        .collect()
}

pub fn mut_loss<T: Real>(trace: &ForwardTrace<T>, js: JsImpl) -> Vec<f64> {
    let (q1, q2) = (&trace.q1, &trace.q2);
    (0..trace.batch())
        .map(|i| {
            let args = (q1.mean.row(i), q1.log_var.row(i), q2.mean.row(i), q2.log_var.row(i));
            match js {
                JsImpl::MomentMatched => js_row(args.0, args.1, args.2, args.3),
                JsImpl::SymmetricKl => sym_kl_row(args.0, args.1, args.2, args.3),
            }
        })
        .collect()
}

pub fn consist_loss<T: Real>(trace: &ForwardTrace<T>, js: JsImpl) -> Vec<f64> {
    enc2_loss(trace)
        .into_iter()
        .zip(mut_loss(trace, js))
        .map(|(a, b)| a + b)
        .collect()
}

pub fn sample_terms<T: Real>(trace: &ForwardTrace<T>, js: JsImpl) -> Result<Vec<SampleTerms>> {
    let recon = recon_loss(&trace.x, &trace.x_hat)?;
    let enc1 = enc1_loss(trace);
    let enc2 = enc2_loss(trace);
    let mu = mut_loss(trace, js);
    Ok((0..trace.batch())
        .map(|i| SampleTerms {
            recon: recon[i],
            enc1: enc1[i],
            enc2: enc2[i],
            mut_: mu[i],
        })
        .collect())
}

pub fn normal_loss<T: Real>(trace: &ForwardTrace<T>, w: &LossWeights, js: JsImpl) -> Result<Vec<f64>> {
    let pixels = trace.x.row_len();
    Ok(sample_terms(trace, js)?.iter().map(|t| t.normal(w, pixels)).collect())
}

/// Loss for a DSA-transformed image's trace; no reconstruction term.
pub fn pseudo_loss<T: Real>(trace: &ForwardTrace<T>, w: &LossWeights, js: JsImpl) -> Vec<f64> {
    anomaly_only(trace, w, js)
}

/// Loss for a real labelled anomaly; same form as [`pseudo_loss`] on an untransformed image.
pub fn anomalous_loss<T: Real>(trace: &ForwardTrace<T>, w: &LossWeights, js: JsImpl) -> Vec<f64> {
    anomaly_only(trace, w, js)
}

fn anomaly_only<T: Real>(trace: &ForwardTrace<T>, w: &LossWeights, js: JsImpl) -> Vec<f64> {
    let enc1 = enc1_loss(trace);
    let consist = consist_loss(trace, js);
    enc1.into_iter()
        .zip(consist)
        .map(|(e, c)| e + w.lambda_consist * c)
        .collect()
}

/// Coefficients of (recon, enc1, enc2, mut) in the objective for one sample.
fn coefficients(role: Role, w: &LossWeights, pixels: usize) -> [f64; 4] {
    let l = w.lambda_consist;
    let r = w.recon_weight(pixels);
    match role {
        Role::Normal => [r, 1.0, l, l],
        Role::PseudoAnomaly | Role::RealAnomaly => {
            let b = w.beta_anom;
            [0.0, b, b * l, b * l]
        }
    }
}

fn check_batch<T: Real>(mode: TrainingMode, trace: &ForwardTrace<T>, roles: &[Role]) -> Result<()> {
    if roles.len() != trace.batch() {
        return Err(Error::invalid(format!(
            "{} roles for a batch of {}",
            roles.len(),
            trace.batch()
        )));
    }
    check_roles(mode, roles)
}

/// Scalar batch objective (a sum over samples).
pub fn batch_objective<T: Real>(
    mode: TrainingMode,
    trace: &ForwardTrace<T>,
    roles: &[Role],
    w: &LossWeights,
    js: JsImpl,
) -> Result<f64> {
    check_batch(mode, trace, roles)?;
    let terms = sample_terms(trace, js)?;
    Ok(terms
        .iter()
        .zip(roles)
        .map(|(t, &r)| {
            let [cr, c1, c2, cm] = coefficients(r, w, trace.x.row_len());
            cr * t.recon + c1 * t.enc1 + c2 * t.enc2 + cm * t.mut_
        })
        .sum())
}

pub struct ObjectiveEval<T> {
    pub value: f64,
    pub terms: Vec<SampleTerms>,
    pub grads: TraceGrads<T>,
}

/// Objective value, per-sample terms, and the gradient with respect to the trace.
pub fn batch_objective_with_grad<T: Real>(
    mode: TrainingMode,
    trace: &ForwardTrace<T>,
    roles: &[Role],
    w: &LossWeights,
    js: JsImpl,
) -> Result<ObjectiveEval<T>> {
    check_batch(mode, trace, roles)?;
    let terms = sample_terms(trace, js)?;
    let mut grads = TraceGrads::zeros_like(trace);
    let mut value = 0.0;
    let per = trace.x.row_len().max(1) as f64;
    for (i, (t, &role)) in terms.iter().zip(roles).enumerate() {
        let [cr, c1, c2, cm] = coefficients(role, w, trace.x.row_len());
        value += cr * t.recon + c1 * t.enc1 + c2 * t.enc2 + cm * t.mut_;

        if cr != 0.0 {
            let g = cr / per;
            let x = trace.x.row(i);
            let xh = trace.x_hat.row(i);
            for (d, (&a, &b)) in grads.x_hat.row_mut(i).iter_mut().zip(x.iter().zip(xh)) {
                let diff = b - a;
                if diff > T::zero() {
                    *d += T::c(g);
                } else if diff < T::zero() {
                    *d -= T::c(g);
                }
            }
        }
        let (q1, q2) = (&trace.q1, &trace.q2);
        let g1 = &mut grads.q1;
        let g2 = &mut grads.q2;
        if c1 != 0.0 {
            kl_std_row_grad(q1.mean.row(i), q1.log_var.row(i), c1, g1.mean.row_mut(i), g1.log_var.row_mut(i));
        }
        if c2 != 0.0 {
            kl_std_row_grad(q2.mean.row(i), q2.log_var.row(i), c2, g2.mean.row_mut(i), g2.log_var.row_mut(i));
        }
        if cm != 0.0 {
            let grad_fn = match js {
                JsImpl::MomentMatched => js_row_grad::<T>,
                JsImpl::SymmetricKl => sym_kl_row_grad::<T>,
            };
            grad_fn(
                q1.mean.row(i),
                q1.log_var.row(i),
                q2.mean.row(i),
                q2.log_var.row(i),
                cm,
                g1.mean.row_mut(i),
                g1.log_var.row_mut(i),
                g2.mean.row_mut(i),
                g2.log_var.row_mut(i),
            );
        }
    }
    Ok(ObjectiveEval { value, terms, grads })
}
