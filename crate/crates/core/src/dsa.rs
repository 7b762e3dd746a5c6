//! Distributionally-shifted augmentation: turns normal images into pseudo-anomalies
//! with flips, a counter-clockwise quarter turn, or a cutout square.
//!
//! Every transform is an exact pixel permutation or overwrite; nothing is interpolated.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Role;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DsaOp {
    FlipH,
    FlipV,
    Rot90,
    Cutout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DsaConfig {
    pub probability: f64,
    pub transform_pool: Vec<DsaOp>,
    /// Inclusive range of how many distinct ops are composed on a selected sample.
    pub ops_per_sample: [usize; 2],
    pub cutout_frac: f64,
    pub cutout_fill: f64,
}

impl Default for DsaConfig {
    fn default() -> Self {
        Self {
            probability: 0.01,
            transform_pool: vec![DsaOp::FlipH, DsaOp::FlipV, DsaOp::Rot90],
            ops_per_sample: [1, 3],
            cutout_frac: 0.5,
            cutout_fill: 0.0,
        }
    }
}

impl DsaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::config("dsa.probability", "must lie in [0, 1]"));
        }
        if self.probability > 0.0 && self.transform_pool.is_empty() {
            return Err(Error::config(
                "dsa.transform_pool",
                "must be non-empty when probability > 0",
            ));
        }
        let mut seen = self.transform_pool.clone();
        seen.sort_by_key(|op| *op as u8);
        seen.dedup();
        if seen.len() != self.transform_pool.len() {
            return Err(Error::config("dsa.transform_pool", "contains duplicates"));
        }
        let [lo, hi] = self.ops_per_sample;
        if lo < 1 || hi > 3 || lo > hi {
            return Err(Error::config(
                "dsa.ops_per_sample",
                format!("must be a range within [1, 3], got [{lo}, {hi}]"),
            ));
        }
        if !(self.cutout_frac > 0.0 && self.cutout_frac < 1.0) {
            return Err(Error::config("dsa.cutout_frac", "must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.cutout_fill) {
            return Err(Error::config("dsa.cutout_fill", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Per-sample anomaly flags: `true` marks a pseudo or real anomaly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleMask {
    pub y: Vec<bool>,
}

impl RoleMask {
    pub fn count(&self) -> usize {
        self.y.iter().filter(|&&b| b).count()
    }

    /// Roles for a DSA batch: selected samples are pseudo-anomalies.
    pub fn pseudo_roles(&self) -> Vec<Role> {
        self.y
            .iter()
            .map(|&b| if b { Role::PseudoAnomaly } else { Role::Normal })
            .collect()
    }
}

fn for_each_plane<T: Real>(x: &Tensor<T>, mut f: impl FnMut(&[T], &mut [T], usize, usize)) -> Result<Tensor<T>> {
    let (_, _, h, w) = x.dims4()?;
    let mut out = x.clone();
    let plane = h * w;
    if plane > 0 {
        for (src, dst) in x.data().chunks(plane).zip(out.data_mut().chunks_mut(plane)) {
            f(src, dst, h, w);
        }
    }
    Ok(out)
}

/// Mirror left-right: `out(r, c) = x(r, W−1−c)`.
pub fn flip_h<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    for_each_plane(x, |src, dst, h, w| {
        for r in 0..h {
            for c in 0..w {
                dst[r * w + c] = src[r * w + (w - 1 - c)];
            }
        }
    })
}

/// Mirror top-bottom: `out(r, c) = x(H−1−r, c)`.
pub fn flip_v<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    for_each_plane(x, |src, dst, h, w| {
        for r in 0..h {
            dst[r * w..(r + 1) * w].copy_from_slice(&src[(h - 1 - r) * w..(h - r) * w]);
        }
    })
}

/// Counter-clockwise quarter turn: `out(r, c) = x(c, W−1−r)`.
pub fn rot90<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, h, w) = x.dims4()?;
    if h != w {
        return Err(Error::invalid(format!("rot90 needs square images, got {h}×{w}")));
    }
    for_each_plane(x, |src, dst, _, n| {
        for r in 0..n {
            for c in 0..n {
                dst[r * n + c] = src[c * n + (n - 1 - r)];
            }
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Overwrites `rect` with `fill` in every channel of every image.
pub fn cutout<T: Real>(x: &Tensor<T>, rect: Rect, fill: T) -> Result<Tensor<T>> {
    let (_, _, h, w) = x.dims4()?;
    if rect.top + rect.height > h || rect.left + rect.width > w {
        return Err(Error::invalid(format!(
            "cutout rectangle {rect:?} exceeds the {h}×{w} image"
        )));
    }
    for_each_plane(x, |_, dst, _, w| {
        for r in rect.top..rect.top + rect.height {
            dst[r * w + rect.left..r * w + rect.left + rect.width].fill(fill);
        }
    })
}

fn apply_op<T: Real>(x: &Tensor<T>, op: DsaOp, cfg: &DsaConfig, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    match op {
        DsaOp::FlipH => flip_h(x),
        DsaOp::FlipV => flip_v(x),
        DsaOp::Rot90 => rot90(x),
        DsaOp::Cutout => {
            let (_, _, h, w) = x.dims4()?;
            let side_h = ((cfg.cutout_frac * h as f64).round() as usize).clamp(1, h);
            let side_w = ((cfg.cutout_frac * w as f64).round() as usize).clamp(1, w);
            let rect = Rect {
                top: rng.random_range(0..=h - side_h),
                left: rng.random_range(0..=w - side_w),
                height: side_h,
                width: side_w,
            };
            cutout(x, rect, T::c(cfg.cutout_fill))
        }
    }
}

/// Selects each sample with probability `cfg.probability` and replaces it with a random
/// composition of distinct ops from the pool. Sample `i` draws from its own stream of a
/// generator seeded once from `rng`, so results do not depend on batch composition order.
pub fn apply_dsa<T: Real>(batch: &Tensor<T>, cfg: &DsaConfig, rng: &mut impl Rng) -> Result<(Tensor<T>, RoleMask)> {
    cfg.validate()?;
    batch.dims4()?;
    let base: u64 = rng.random();
    let mut out = batch.clone();
    let mut y = vec![false; batch.batch()];
    for (i, flag) in y.iter_mut().enumerate() {
        let mut r = ChaCha8Rng::seed_from_u64(base);
        r.set_stream(i as u64);
        if !r.random_bool(cfg.probability) {
            continue;
        }
        *flag = true;
        let [lo, hi] = cfg.ops_per_sample;
        let pool = cfg.transform_pool.len();
        let k = r.random_range(lo..=hi).min(pool);
        let mut img = batch.select(&[i]);
        for j in sample_indices(&mut r, pool, k).into_iter() {
            img = apply_op(&img, cfg.transform_pool[j], cfg, &mut r)?;
        }
        out.row_mut(i).copy_from_slice(img.data());
    }
    Ok((out, RoleMask { y }))
}
