//! Training loop for the three modes.
//!
//! Each step runs encode → sample → decode → re-encode with the single shared encoder,
//! evaluates the mode's batch objective, backpropagates through the whole chain, and
//! takes one Adam step. The learning rate follows a cosine schedule with warm restarts.
//! Test AUROC is computed every `eval_every` epochs and the best-scoring model is kept
//! alongside the final one.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::datasets::{batch_tensor, OneClassTask, SampleRecord};
use crate::dsa::apply_dsa;
use crate::error::{Error, Result};
use crate::losses::{batch_objective_with_grad, check_roles, Role, SampleTerms, TrainingMode};
use crate::networks::Vae;
use crate::optim::{cosine_lr, Adam};
use crate::scoring::score_records;
use crate::tensor::{Real, Tensor};

/// Independent random streams derived from the root seed.
pub mod streams {
    pub const SPLIT: u64 = 1;
    pub const TRAIN: u64 = 2;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TermMeans {
    pub recon: f64,
    pub enc1: f64,
    pub enc2: f64,
    #[serde(rename = "mut")]
    pub mut_: f64,
}

#[derive(Default)]
struct TermAccumulator {
    sum: TermMeans,
    count: usize,
}

impl TermAccumulator {
    fn add(&mut self, t: &SampleTerms) {
        self.sum.recon += t.recon;
        self.sum.enc1 += t.enc1;
        self.sum.enc2 += t.enc2;
        self.sum.mut_ += t.mut_;
        self.count += 1;
    }

    fn mean(&self) -> Option<TermMeans> {
        (self.count > 0).then(|| {
            let n = self.count as f64;
            TermMeans {
                recon: self.sum.recon / n,
                enc1: self.sum.enc1 / n,
                enc2: self.sum.enc2 / n,
                mut_: self.sum.mut_ / n,
            }
        })
    }
}

/// One line of `train_log.jsonl`. Term means without a prefix are over normal-role
/// samples; `anomaly_*` means are over pseudo or real anomalies and are null when the
/// epoch saw none.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean of the per-batch objectives (each a sum over its batch).
    pub objective: f64,
    pub recon_mean: f64,
    pub enc1_mean: f64,
    pub enc2_mean: f64,
    pub mut_mean: f64,
    pub anomalies: usize,
    pub anomaly_recon_mean: Option<f64>,
    pub anomaly_enc1_mean: Option<f64>,
    pub anomaly_enc2_mean: Option<f64>,
    pub anomaly_mut_mean: Option<f64>,
    pub auroc: Option<f64>,
}

pub struct StepOutput {
    pub objective: f64,
    pub terms: Vec<SampleTerms>,
}

fn batch_diagnostics<T: Real>(x: &Tensor<T>) -> String {
    let n = x.len().max(1) as f64;
    let mean = x.data().iter().map(|v| v.f64()).sum::<f64>() / n;
    let (lo, hi) = x
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.f64()), hi.max(v.f64())));
    format!("batch of {} images, pixel mean {mean:.4}, min {lo:.4}, max {hi:.4}", x.batch())
}

/// One optimizer update on `batch` with explicit reparameterization noise.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Real>(
    model: &mut Vae<T>,
    opt: &mut Adam<T>,
    batch: &Tensor<T>,
    roles: &[Role],
    noise: Tensor<T>,
    cfg: &RunConfig,
    lr: f64,
) -> Result<StepOutput> {
    check_roles(cfg.mode, roles)?;
    model.zero_grad();
    let pass = model.train_forward(batch, noise)?;
    let eval = batch_objective_with_grad(cfg.mode, &pass.trace, roles, &cfg.weights(), cfg.js_impl)?;
    let finite_terms = eval
        .terms
        .iter()
        .all(|t| t.recon.is_finite() && t.enc1.is_finite() && t.enc2.is_finite() && t.mut_.is_finite());
    if !eval.value.is_finite() || !finite_terms {
        let worst = eval
            .terms
            .iter()
            .enumerate()
            .find(|(_, t)| !(t.recon + t.enc1 + t.enc2 + t.mut_).is_finite())
            .map(|(i, t)| format!("; first bad sample {i}: {t:?}"))
            .unwrap_or_default();
        return Err(Error::NonFinite(format!(
            "objective {} at lr {lr}; {}{worst}",
            eval.value,
            batch_diagnostics(batch)
        )));
    }
    model.commit_running_stats(&pass);
    model.backward(pass, &eval.grads)?;
    opt.step(model, lr);
    Ok(StepOutput {
        objective: eval.value,
        terms: eval.terms,
    })
}

pub struct Trainer<T> {
    pub model: Vae<T>,
    pub cfg: RunConfig,
    opt: Adam<T>,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Vae<T>, cfg: RunConfig) -> Self {
        let rng = stream_rng(cfg.seed, streams::TRAIN);
        Self {
            model,
            cfg,
            opt: Adam::default(),
            rng,
            epoch: 0,
        }
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    fn noise(&mut self, n: usize) -> Tensor<T> {
        let d = self.model.latent_dim();
        let data = (0..n * d)
            .map(|_| T::c(self.rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Tensor::from_vec(&[n, d], data).expect("noise shape")
    }

    /// One pass over the training records. Batches smaller than two are skipped since
    /// batch statistics are undefined for them.
    pub fn run_epoch(&mut self, train: &[SampleRecord], task: &OneClassTask) -> Result<EpochLog> {
        let lr = cosine_lr(self.epoch, self.cfg.lr0, self.cfg.t_max);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let augment = task.augmentation.flip_h || task.augmentation.flip_v || task.augmentation.rigid;
        let shape = task.image_shape;
        let mut objective = 0.0;
        let mut batches = 0usize;
        let (mut normal, mut anomal) = (TermAccumulator::default(), TermAccumulator::default());
        for chunk in order.chunks(self.cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let owned: Vec<SampleRecord>;
            let refs: Vec<&SampleRecord> = if augment {
                owned = chunk
                    .iter()
                    .map(|&i| train[i].augmented(shape, &task.augmentation, &mut self.rng))
                    .collect();
                owned.iter().collect()
            } else {
                chunk.iter().map(|&i| &train[i]).collect()
            };
            let x = batch_tensor::<T>(&refs, shape)?;
            let (x, roles) = match self.cfg.mode {
                TrainingMode::OneClass => (x, vec![Role::Normal; refs.len()]),
                TrainingMode::Shifted => {
                    let (y, mask) = apply_dsa(&x, &self.cfg.dsa, &mut self.rng)?;
                    (y, mask.pseudo_roles())
                }
                TrainingMode::Imbalanced => (x, refs.iter().map(|r| r.role).collect()),
            };
            let noise = self.noise(refs.len());
            let lr_step = lr;
            let out = train_step(&mut self.model, &mut self.opt, &x, &roles, noise, &self.cfg, lr_step)
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("epoch {}, batch {batches}: {m}", self.epoch)),
                    other => other,
                })?;
            objective += out.objective;
            batches += 1;
            for (t, r) in out.terms.iter().zip(&roles) {
                if r.is_anomalous() {
                    anomal.add(t);
                } else {
                    normal.add(t);
                }
            }
        }
        let n = normal.mean().unwrap_or_default();
        let a = anomal.mean();
        let log = EpochLog {
            epoch: self.epoch,
            lr,
            objective: if batches > 0 { objective / batches as f64 } else { 0.0 },
            recon_mean: n.recon,
            enc1_mean: n.enc1,
            enc2_mean: n.enc2,
            mut_mean: n.mut_,
            anomalies: anomal.count,
            anomaly_recon_mean: a.map(|m| m.recon),
            anomaly_enc1_mean: a.map(|m| m.enc1),
            anomaly_enc2_mean: a.map(|m| m.enc2),
            anomaly_mut_mean: a.map(|m| m.mut_),
            auroc: None,
        };
        self.epoch += 1;
        Ok(log)
    }
}

pub struct FitOutcome<T> {
    pub model: Vae<T>,
    /// (epoch index, AUROC, model) of the best evaluation, if any evaluation ran.
    pub best: Option<(usize, f64, Vae<T>)>,
    pub logs: Vec<EpochLog>,
}

/// Where `fit` writes its artifacts.
#[derive(Clone, Debug)]
pub struct FitArtifacts {
    pub dir: PathBuf,
}

impl FitArtifacts {
    pub fn best(&self) -> PathBuf {
        self.dir.join("checkpoint.best")
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("checkpoint.final")
    }
    pub fn log(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }
}

fn write_line(w: &mut BufWriter<File>, path: &Path, log: &EpochLog) -> Result<()> {
    let line = serde_json::to_string(log).map_err(|e| Error::invalid(e.to_string()))?;
    writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Trains `model` on `task.train` for `cfg.epochs` epochs. With `artifacts`, the log is
/// streamed to `train_log.jsonl` and the final and best checkpoints are written.
pub fn fit<T: Real>(
    model: Vae<T>,
    task: &OneClassTask,
    cfg: &RunConfig,
    artifacts: Option<&FitArtifacts>,
) -> Result<FitOutcome<T>> {
    cfg.validate()?;
    if cfg.mode != TrainingMode::Imbalanced && task.train_anomaly_count() > 0 {
        return Err(Error::invalid(format!(
            "mode {} cannot train on a task with labelled anomalies",
            cfg.mode.code()
        )));
    }
    let mut log_file = match artifacts {
        Some(a) => {
            std::fs::create_dir_all(&a.dir).map_err(|e| Error::io(&a.dir, e))?;
            let p = a.log();
            Some((BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?), p))
        }
        None => None,
    };
    let mut trainer = Trainer::new(model, cfg.clone());
    let mut logs = Vec::new();
    let mut best: Option<(usize, f64, Vae<T>)> = None;
    let eval_batch = 64;
    for e in 0..cfg.epochs {
        let mut log = trainer.run_epoch(&task.train, task)?;
        let due = (e + 1) % cfg.eval_every == 0 || e + 1 == cfg.epochs;
        if due && !task.test.is_empty() {
            let report = score_records(&trainer.model, &task.test, cfg.alpha_score, eval_batch, cfg.js_impl)?;
            log.auroc = report.auroc;
            if let Some(auc) = report.auroc {
                if best.as_ref().is_none_or(|(_, b, _)| auc > *b) {
                    let mut snapshot = trainer.model.clone();
                    if let Some(a) = artifacts {
                        checkpoint::save(&a.best(), &mut snapshot, Some(cfg), (e + 1) as u64)?;
                    }
                    best = Some((e, auc, snapshot));
                }
            }
        }
        log::info!(
            "epoch {e}: lr {:.5} objective {:.4} recon {:.4} mut {:.4} auroc {}",
            log.lr,
            log.objective,
            log.recon_mean,
            log.mut_mean,
            log.auroc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into())
        );
        if let Some((w, p)) = log_file.as_mut() {
            write_line(w, p, &log)?;
        }
        logs.push(log);
    }
    let mut model = trainer.model;
    if let Some(a) = artifacts {
        checkpoint::save(&a.last(), &mut model, Some(cfg), cfg.epochs as u64)?;
    }
    Ok(FitOutcome { model, best, logs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DataConfig, DataKind};
    use crate::dsa::DsaConfig;
    use crate::networks::{Backbone, EncoderSpec};

    fn mini_spec() -> EncoderSpec {
        EncoderSpec {
            input_shape: (1, 8, 8),
            latent_dim: 8,
            backbone: Backbone::SmallConv,
            widths: vec![4, 4, 8, 8],
        }
    }

    fn cfg(mode: TrainingMode) -> RunConfig {
        let mut c = RunConfig::new(
            mode,
            DataConfig {
                kind: DataKind::Synthetic,
                dir: None,
                target_class: 0,
                category: None,
                image_size: 256,
                channels: 1,
                n_per_class: 4,
                classes: 2,
                max_train: None,
                max_test: None,
            },
        );
        c.latent_dim = 8;
        c.model.widths = vec![4, 4, 8, 8];
        c
    }

    fn batch(seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[4, 1, 8, 8], (0..256).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    fn noise(seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[4, 8], (0..32).map(|_| r.sample::<f64, _>(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn zero_lr_steps_leave_parameters_unchanged() {
        let mut vae = Vae::<f64>::new_unchecked(&mini_spec(), 0).unwrap();
        let before: Vec<_> = vae.named_tensors().into_iter().filter(|(n, _)| !n.contains("running")).collect();
        let mut opt = Adam::default();
        let c = cfg(TrainingMode::OneClass);
        for _ in 0..2 {
            train_step(&mut vae, &mut opt, &batch(1), &[Role::Normal; 4], noise(2), &c, 0.0).unwrap();
        }
        let after: Vec<_> = vae.named_tensors().into_iter().filter(|(n, _)| !n.contains("running")).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn objective_decreases_on_miniature_model() {
        let mut vae = Vae::<f64>::new_unchecked(&mini_spec(), 0).unwrap();
        let mut opt = Adam::default();
        let c = cfg(TrainingMode::OneClass);
        let x = batch(3);
        let first = train_step(&mut vae, &mut opt, &x, &[Role::Normal; 4], noise(0), &c, 0.0).unwrap().objective;
        let mut last = first;
        for s in 0..200 {
            last = train_step(&mut vae, &mut opt, &x, &[Role::Normal; 4], noise(s + 1), &c, 0.005).unwrap().objective;
        }
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn all_normal_shifted_batch_matches_one_class_gradients() {
        let c_o = cfg(TrainingMode::OneClass);
        let c_d = RunConfig { mode: TrainingMode::Shifted, ..cfg(TrainingMode::OneClass) };
        let mut grads = Vec::new();
        for c in [&c_o, &c_d] {
            let mut vae = Vae::<f64>::new_unchecked(&mini_spec(), 5).unwrap();
            let mut opt = Adam::default();
            train_step(&mut vae, &mut opt, &batch(4), &[Role::Normal; 4], noise(4), c, 0.0).unwrap();
            let mut g = Vec::new();
            vae.visit(&mut |_, slot| {
                if let crate::nn::Slot::Param(p) = slot {
                    g.push(p.grad.clone());
                }
            });
            grads.push(g);
        }
        assert_eq!(grads[0], grads[1]);
    }

    #[test]
    fn non_finite_input_aborts_with_diagnostics() {
        let mut vae = Vae::<f64>::new_unchecked(&mini_spec(), 0).unwrap();
        let before = vae.named_tensors();
        let mut x = batch(1);
        x.data_mut()[3] = f64::NAN;
        let err = train_step(&mut vae, &mut Adam::default(), &x, &[Role::Normal; 4], noise(0), &cfg(TrainingMode::OneClass), 0.01)
            .err()
            .unwrap();
        match err {
            Error::NonFinite(m) => assert!(m.contains("lr 0.01") && m.contains("pixel mean"), "{m}"),
            other => panic!("{other:?}"),
        }
        assert_eq!(before, vae.named_tensors());
    }

    #[test]
    fn role_mode_mismatch_is_rejected() {
        let mut vae = Vae::<f64>::new_unchecked(&mini_spec(), 0).unwrap();
        let roles = [Role::Normal, Role::PseudoAnomaly, Role::Normal, Role::Normal];
        assert!(train_step(&mut vae, &mut Adam::default(), &batch(1), &roles, noise(0), &cfg(TrainingMode::OneClass), 0.01).is_err());
    }

    #[test]
    fn anomalies_without_consistency_leave_the_decoder_untouched() {
        let mut c = cfg(TrainingMode::Imbalanced);
        c.lambda_consist = 0.0;
        let mut vae = Vae::<f64>::new_unchecked(&mini_spec(), 3).unwrap();
        train_step(&mut vae, &mut Adam::default(), &batch(2), &[Role::RealAnomaly; 4], noise(2), &c, 0.0).unwrap();
        let (mut dec, mut enc) = (0.0, 0.0);
        vae.visit(&mut |name, slot| {
            if let crate::nn::Slot::Param(p) = slot {
                let norm: f64 = p.grad.data().iter().map(|g| g * g).sum();
                if name.starts_with("decoder") {
                    dec += norm;
                } else {
                    enc += norm;
                }
            }
        });
        assert_eq!(dec, 0.0);
        assert!(enc > 0.0);
    }

    #[test]
    fn epochs_are_reproducible_from_the_seed() {
        let mut c = cfg(TrainingMode::Shifted);
        c.data.n_per_class = 24;
        c.dsa.probability = 0.5;
        let task = crate::experiment::build_task(&c).unwrap();
        let spec = EncoderSpec {
            input_shape: (1, 32, 32),
            ..mini_spec()
        };
        let run = || {
            let mut t = Trainer::new(Vae::<f32>::new_unchecked(&spec, c.seed).unwrap(), c.clone());
            let logs: Vec<f64> = (0..2).map(|_| t.run_epoch(&task.train, &task).unwrap().objective).collect();
            (logs, t.model.named_tensors())
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_ne!(a.0[0], a.0[1]);
    }

    #[test]
    fn dsa_defaults_are_used_for_shifted_mode() {
        assert_eq!(cfg(TrainingMode::Shifted).dsa, DsaConfig::default());
    }
}
