//! Outlier scores, min–max normalization, AUROC, the score-term correspondence
//! indicator, and latent-mean export.
//!
//! Scoring is two-pass: the model is first run over the whole evaluation set to get
//! per-sample `mut` (latent divergence between encoding and recoding) and `recon`
//! (mean absolute pixel error), whose set means become the normalization constants of
//! `s = α·mut/E_mut + (1−α)·recon/E_recon`. Inference decodes the posterior mean; no
//! sampling is involved, so scores are deterministic.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::datasets::{batch_tensor, SampleRecord};
use crate::error::{Error, Result};
use crate::latent::JsImpl;
use crate::losses::{mut_loss, recon_loss};
use crate::networks::Vae;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormConstants {
    pub e_mut: f64,
    pub e_recon: f64,
}

impl NormConstants {
    /// Means of the two terms over an evaluation set.
    pub fn from_terms(mut_terms: &[f64], recon_terms: &[f64]) -> Result<Self> {
        if mut_terms.is_empty() || mut_terms.len() != recon_terms.len() {
            return Err(Error::invalid("normalization needs equally many, and at least one, mut and recon terms"));
        }
        let n = mut_terms.len() as f64;
        let c = Self {
            e_mut: mut_terms.iter().sum::<f64>() / n,
            e_recon: recon_terms.iter().sum::<f64>() / n,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.e_mut.is_finite() && self.e_recon.is_finite()) {
            return Err(Error::NonFinite(format!(
                "normalization constants E_mut={} E_recon={}",
                self.e_mut, self.e_recon
            )));
        }
        if !(self.e_mut > 0.0 && self.e_recon > 0.0) {
            return Err(Error::invalid(format!(
                "normalization constants must be positive, got E_mut={} E_recon={}",
                self.e_mut, self.e_recon
            )));
        }
        Ok(())
    }
}

/// Per-sample `(mut, recon)` for one batch, from the deterministic inference chain.
pub fn batch_terms<T: Real>(model: &Vae<T>, batch: &Tensor<T>, js: JsImpl) -> Result<(Vec<f64>, Vec<f64>)> {
    let trace = model.infer(batch)?;
    Ok((mut_loss(&trace, js), recon_loss(&trace.x, &trace.x_hat)?))
}

/// `(mut, recon)` for every record, evaluated `batch_size` at a time in order.
pub fn record_terms<T: Real>(
    model: &Vae<T>,
    records: &[SampleRecord],
    batch_size: usize,
    js: JsImpl,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let shape = model.input_shape();
    let mut m = Vec::with_capacity(records.len());
    let mut r = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch_size.max(1)) {
        let refs: Vec<&SampleRecord> = chunk.iter().collect();
        let x = batch_tensor::<T>(&refs, shape)?;
        let (bm, br) = batch_terms(model, &x, js)?;
        m.extend(bm);
        r.extend(br);
    }
    Ok((m, r))
}

/// `s = α·mut/E_mut + (1−α)·recon/E_recon` from precomputed terms.
pub fn score_terms(mut_terms: &[f64], recon_terms: &[f64], norm: NormConstants, alpha: f64) -> Result<Vec<f64>> {
    norm.validate()?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if mut_terms.len() != recon_terms.len() {
        return Err(Error::invalid("mut and recon term counts differ"));
    }
    Ok(mut_terms
        .iter()
        .zip(recon_terms)
        .map(|(&m, &r)| alpha * (m / norm.e_mut) + (1.0 - alpha) * (r / norm.e_recon))
        .collect())
}

/// Raw scores of one batch against fixed normalization constants.
pub fn score_batch<T: Real>(
    model: &Vae<T>,
    batch: &Tensor<T>,
    norm: NormConstants,
    alpha: f64,
    js: JsImpl,
) -> Result<Vec<f64>> {
    norm.validate()?;
    let (m, r) = batch_terms(model, batch, js)?;
    score_terms(&m, &r, norm, alpha)
}

/// Min–max scaling to [0, 1]. A constant vector maps to all zeros with a warning.
pub fn normalize_scores(s: &[f64]) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Err(Error::invalid("cannot normalize an empty score vector"));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        log::warn!("all {} scores equal {lo}; normalized scores are all zero", s.len());
        return Ok(vec![0.0; s.len()]);
    }
    Ok(s.iter().map(|&v| (v - lo) / (hi - lo)).collect())
}

/// Probability that a random anomaly (label 1) outscores a random normal (label 0),
/// ties counted one half, via the Mann–Whitney rank sum.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    if scores.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("scores contain NaN"));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("AUROC needs both normal and anomalous labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j share their average
        let avg = (i + j + 1) as f64 / 2.0;
        rank_sum += avg * order[i..j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// Per-sample `a_i = (mut/E_mut)/(recon/E_recon)` and the population standard deviation
/// of the defined values. Samples with zero reconstruction error are skipped with a
/// warning and reported as `None`.
pub fn correspondence_from_terms(mut_terms: &[f64], recon_terms: &[f64], norm: NormConstants) -> Result<(Vec<Option<f64>>, f64)> {
    norm.validate()?;
    if mut_terms.len() != recon_terms.len() {
        return Err(Error::invalid("mut and recon term counts differ"));
    }
    let a: Vec<Option<f64>> = mut_terms
        .iter()
        .zip(recon_terms)
        .map(|(&m, &r)| (r > 0.0).then(|| (m / norm.e_mut) / (r / norm.e_recon)))
        .collect();
    let skipped = a.iter().filter(|v| v.is_none()).count();
    if skipped > 0 {
        log::warn!("{skipped} samples with zero reconstruction error excluded from S_a");
    }
    Ok((a.clone(), population_sd(&a.into_iter().flatten().collect::<Vec<_>>())))
}

pub fn population_sd(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// The indicator over a set of normal images; constants are the set's own term means.
pub fn correspondence_indicator<T: Real>(
    model: &Vae<T>,
    normals: &[SampleRecord],
    batch_size: usize,
    js: JsImpl,
) -> Result<(Vec<Option<f64>>, f64)> {
    if let Some(r) = normals.iter().find(|r| r.label != 0) {
        return Err(Error::invalid(format!("correspondence indicator takes normals only, got {}", r.id)));
    }
    let (m, r) = record_terms(model, normals, batch_size, js)?;
    correspondence_from_terms(&m, &r, NormConstants::from_terms(&m, &r)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub label: u8,
    pub s: f64,
    pub s_prime: f64,
    #[serde(rename = "mut")]
    pub mut_term: f64,
    #[serde(rename = "recon")]
    pub recon_term: f64,
    /// Only defined for normals.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_i: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub alpha: f64,
    /// `None` when the evaluated set holds a single class.
    pub auroc: Option<f64>,
    pub s_a: f64,
    pub e_mut: f64,
    pub e_recon: f64,
    pub samples: Vec<SampleScore>,
}

impl ScoreReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::invalid(format!("report serialization: {e}")))
    }
}

/// Builds a report from precomputed terms. Normalization constants default to the
/// means over this set; `a_i` and `S_a` use the means over its normals.
pub fn report_from_terms(
    records: &[SampleRecord],
    mut_terms: &[f64],
    recon_terms: &[f64],
    alpha: f64,
    norm: Option<NormConstants>,
) -> Result<ScoreReport> {
    if records.len() != mut_terms.len() || records.len() != recon_terms.len() {
        return Err(Error::invalid("record and term counts differ"));
    }
    let norm = match norm {
        Some(n) => n,
        None => NormConstants::from_terms(mut_terms, recon_terms)?,
    };
    let s = score_terms(mut_terms, recon_terms, norm, alpha)?;
    let s_prime = normalize_scores(&s)?;
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let both = labels.contains(&0) && labels.contains(&1);
    let auc = if both { Some(auroc(&s, &labels)?) } else { None };

    let normal_idx: Vec<usize> = (0..records.len()).filter(|&i| labels[i] == 0).collect();
    let mut a_i = vec![None; records.len()];
    let mut s_a = 0.0;
    if !normal_idx.is_empty() {
        let nm: Vec<f64> = normal_idx.iter().map(|&i| mut_terms[i]).collect();
        let nr: Vec<f64> = normal_idx.iter().map(|&i| recon_terms[i]).collect();
        if let Ok(nn) = NormConstants::from_terms(&nm, &nr) {
            let (a, sd) = correspondence_from_terms(&nm, &nr, nn)?;
            for (&i, v) in normal_idx.iter().zip(a) {
                a_i[i] = v;
            }
            s_a = sd;
        }
    }
    let samples = records
        .iter()
        .enumerate()
        .map(|(i, r)| SampleScore {
            id: r.id.clone(),
            label: r.label,
            s: s[i],
            s_prime: s_prime[i],
            mut_term: mut_terms[i],
            recon_term: recon_terms[i],
            a_i: a_i[i],
        })
        .collect();
    Ok(ScoreReport {
        alpha,
        auroc: auc,
        s_a,
        e_mut: norm.e_mut,
        e_recon: norm.e_recon,
        samples,
    })
}

/// Two-pass scoring of `records`.
pub fn score_records<T: Real>(
    model: &Vae<T>,
    records: &[SampleRecord],
    alpha: f64,
    batch_size: usize,
    js: JsImpl,
) -> Result<ScoreReport> {
    let (m, r) = record_terms(model, records, batch_size, js)?;
    report_from_terms(records, &m, &r, alpha, None)
}

/// Writes `id,label,mu_0..mu_{D-1}` rows of posterior means, one per record.
pub fn export_latents<T: Real>(
    model: &Vae<T>,
    records: &[SampleRecord],
    batch_size: usize,
    out: &mut impl Write,
) -> Result<usize> {
    let d = model.latent_dim();
    let io = |e: std::io::Error| Error::io("<embeddings>", e);
    let header: Vec<String> = ["id".to_string(), "label".to_string()]
        .into_iter()
        .chain((0..d).map(|k| format!("mu_{k}")))
        .collect();
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    let shape = model.input_shape();
    let mut rows = 0;
    for chunk in records.chunks(batch_size.max(1)) {
        let refs: Vec<&SampleRecord> = chunk.iter().collect();
        let q = model.encoder.encode(&batch_tensor::<T>(&refs, shape)?)?;
        for (i, r) in chunk.iter().enumerate() {
            if r.id.contains(',') || r.id.contains('\n') {
                return Err(Error::invalid(format!("sample id {:?} cannot be written as a CSV field", r.id)));
            }
            let mut line = format!("{},{}", r.id, r.label);
            for v in q.mean.row(i) {
                line.push(',');
                line.push_str(&format_real(*v));
            }
            writeln!(out, "{line}").map_err(io)?;
            rows += 1;
        }
    }
    Ok(rows)
}

fn format_real<T: Real>(v: T) -> String {
    if T::NAME == "f32" {
        format!("{}", v.f64() as f32)
    } else {
        format!("{}", v.f64())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::Role;
    use crate::networks::EncoderSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_auc(s: &[f64], y: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] == 1 && y[j] == 0 {
                    den += 1.0;
                    if s[i] > s[j] {
                        num += 1.0;
                    } else if s[i] == s[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auroc_cases() {
        assert_eq!(auroc(&[0.1, 0.9], &[0, 1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.2, 0.4, 0.4, 0.8], &[0, 0, 1, 1]).unwrap(), 0.875);
        assert!(auroc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(auroc(&[0.1], &[1, 0]).is_err());
    }

    #[test]
    fn auroc_matches_brute_force_and_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n = rng.random_range(2..=60);
            let s: Vec<f64> = (0..n).map(|_| (rng.random_range(0..8) as f64) / 4.0).collect();
            let mut y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            y[0] = 0;
            y[1] = 1;
            let a = auroc(&s, &y).unwrap();
            assert_eq!(a, brute_auc(&s, &y));
            let inv: Vec<u8> = y.iter().map(|v| 1 - v).collect();
            assert!((auroc(&s, &inv).unwrap() - (1.0 - a)).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_cases() {
        assert_eq!(normalize_scores(&[2.0, 4.0, 6.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_scores(&[3.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        assert!(normalize_scores(&[]).is_err());
        let v = normalize_scores(&[0.3, -1.0, 7.0, 2.5]).unwrap();
        assert_eq!(normalize_scores(&v).unwrap(), v);
    }

    #[test]
    fn score_arithmetic() {
        let norm = NormConstants { e_mut: 2.0, e_recon: 0.5 };
        assert_eq!(score_terms(&[2.0], &[0.5], norm, 0.3).unwrap(), vec![1.0]);
        assert_eq!(score_terms(&[9.0, 1.0], &[0.25, 1.0], norm, 0.0).unwrap(), vec![0.5, 2.0]);
        let s = score_terms(&[1.0, 2.0, 4.0], &[0.1, 0.5, 0.2], norm, 0.5).unwrap();
        let expected = [0.5 * 0.5 + 0.5 * 0.2, 0.5 * 1.0 + 0.5 * 1.0, 0.5 * 2.0 + 0.5 * 0.4];
        for (a, b) in s.iter().zip(expected) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(score_terms(&[1.0], &[1.0], NormConstants { e_mut: 0.0, e_recon: 1.0 }, 0.5).is_err());
        let scaled = score_terms(&[1.0, 2.0, 4.0], &[0.3, 1.5, 0.6], NormConstants { e_mut: 2.0, e_recon: 1.5 }, 0.5).unwrap();
        for (a, b) in s.iter().zip(scaled) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn correspondence_cases() {
        let norm = NormConstants { e_mut: 1.0, e_recon: 1.0 };
        let (_, sd) = correspondence_from_terms(&[0.5, 0.5, 0.5], &[0.2, 0.2, 0.2], norm).unwrap();
        assert_eq!(sd, 0.0);
        let (a, sd) = correspondence_from_terms(&[1.0, 3.0], &[1.0, 1.0], norm).unwrap();
        assert_eq!(a, vec![Some(1.0), Some(3.0)]);
        assert_eq!(sd, 1.0);
        let (a, _) = correspondence_from_terms(&[1.0, 3.0], &[0.0, 1.0], norm).unwrap();
        assert_eq!(a[0], None);
    }

    fn records(n: usize, seed: u64) -> Vec<SampleRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| SampleRecord {
                id: format!("s{i}"),
                role: Role::Normal,
                label: (i % 3 == 0) as u8,
                class_id: 0,
                subcategory: String::new(),
                pixels: (0..1024).map(|_| rng.random::<f32>()).collect(),
            })
            .collect()
    }

    #[test]
    fn model_scoring_and_export() {
        let vae = Vae::<f32>::new(&EncoderSpec::small(1, 8).with_widths(&[4, 4, 8, 8]), 0).unwrap();
        let mut recs = records(7, 3);
        recs[6].pixels = recs[5].pixels.clone();
        let report = score_records(&vae, &recs, 0.5, 3, JsImpl::MomentMatched).unwrap();
        assert_eq!(report.samples.len(), 7);
        let mean_s: f64 = report.samples.iter().map(|s| s.s).sum::<f64>() / 7.0;
        assert!((mean_s - 1.0).abs() < 1e-9);
        assert!(report.auroc.is_some());
        let again = score_records(&vae, &recs, 0.5, 2, JsImpl::MomentMatched).unwrap();
        assert_eq!(report.to_json().unwrap(), again.to_json().unwrap());

        let mut buf = Vec::new();
        assert_eq!(export_latents(&vae, &recs, 4, &mut buf).unwrap(), 7);
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 8);
        assert!(lines[0].starts_with("id,label,mu_0,"));
        assert!(lines[0].ends_with("mu_7"));
        assert_eq!(lines[6].splitn(3, ',').nth(2), lines[7].splitn(3, ',').nth(2));
        let refs: Vec<&SampleRecord> = recs.iter().collect();
        let mu = vae.encoder.encode(&batch_tensor::<f32>(&refs, (1, 32, 32)).unwrap()).unwrap().mean;
        for (i, line) in lines[1..].iter().enumerate() {
            let vals: Vec<f32> = line.split(',').skip(2).map(|v| v.parse().unwrap()).collect();
            assert_eq!(vals.len(), 8);
            for (a, b) in vals.iter().zip(mu.row(i)) {
                assert!((a - b).abs() <= 1e-7);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn terms() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
            (1usize..40).prop_flat_map(|n| {
                (prop::collection::vec(0.0f64..50.0, n), prop::collection::vec(1e-4f64..1.0, n))
            })
        }

        proptest! {
            #[test]
            fn scores_ignore_the_units_of_each_term((m, r) in terms(), k in 1e-3f64..1e3, alpha in 0.0f64..=1.0) {
                let norm = NormConstants { e_mut: 3.0, e_recon: 0.2 };
                let scaled: Vec<f64> = r.iter().map(|v| v * k).collect();
                let a = score_terms(&m, &r, norm, alpha).unwrap();
                let b = score_terms(&m, &scaled, NormConstants { e_recon: 0.2 * k, ..norm }, alpha).unwrap();
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
                }
            }

            #[test]
            fn normalization_is_monotone_and_idempotent(s in prop::collection::vec(-1e3f64..1e3, 2..50)) {
                let n = normalize_scores(&s).unwrap();
                for i in 0..s.len() {
                    for j in 0..s.len() {
                        if s[i] < s[j] {
                            prop_assert!(n[i] <= n[j]);
                        }
                    }
                }
                let lo = s.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if hi > lo {
                    prop_assert_eq!(n.iter().cloned().fold(f64::INFINITY, f64::min), 0.0);
                    prop_assert_eq!(n.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 1.0);
                    prop_assert_eq!(normalize_scores(&n).unwrap(), n);
                }
            }

            #[test]
            fn auroc_equals_the_pairwise_count(
                pairs in prop::collection::vec((0u8..6, 0u8..2), 2..200)
            ) {
                let mut s: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
                let mut y: Vec<u8> = pairs.iter().map(|p| p.1).collect();
                s[0] += 0.5;
                y[0] = 0;
                y[1] = 1;
                prop_assert_eq!(auroc(&s, &y).unwrap(), brute_auc(&s, &y));
            }
        }
    }
}
