//! Wiring from a [`RunConfig`] to a task, a model, a training run and a score report.

use std::path::{Path, PathBuf};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{DataKind, RunConfig};
use crate::datasets::{
    folder_task, inject_anomalies, load_folder_dataset, load_idx_dir, one_class_split, resize_bilinear,
    synthesize_shapes, FolderLayout, Injection, OneClassTask,
};
use crate::error::{Error, Result};
use crate::losses::TrainingMode;
use crate::networks::Vae;
use crate::scoring::{score_records, ScoreReport};
use crate::tensor::Real;
use crate::trainer::{fit, stream_rng, streams, FitArtifacts, FitOutcome};

pub const EVAL_BATCH: usize = 64;

fn resize_task(task: &mut OneClassTask, side: usize) {
    let shape = task.image_shape;
    if (shape.1, shape.2) == (side, side) {
        return;
    }
    for r in task.train.iter_mut().chain(task.test.iter_mut()) {
        r.pixels = resize_bilinear(&r.pixels, shape, side);
    }
    task.image_shape = (shape.0, side, side);
}

/// Loads the configured data, applies the one-class protocol, subsamples the normal
/// training images, injects real anomalies in mode e (so the fraction is relative to
/// the normals actually used), and subsamples the test split. Every random choice comes
/// from the split stream of `cfg.seed`, so the same config always yields the same task.
pub fn build_task(cfg: &RunConfig) -> Result<OneClassTask> {
    let mut rng = stream_rng(cfg.seed, streams::SPLIT);
    let d = &cfg.data;
    let dir = || -> Result<&PathBuf> { d.dir.as_ref().ok_or_else(|| Error::config("data.dir", "required")) };
    let mut task = match d.kind {
        DataKind::Idx => {
            let (train, test) = load_idx_dir(dir()?)?;
            one_class_split(&train, &test, d.target_class, &mut rng)?
        }
        DataKind::Synthetic => {
            let (train, test) = synthesize_shapes(d.n_per_class, d.classes, 32, &mut rng)?;
            one_class_split(&train, &test, d.target_class, &mut rng)?
        }
        DataKind::Folder => {
            let base = dir()?;
            let (root, name) = match &d.category {
                Some(c) => (base.join(c), c.clone()),
                None => (
                    base.clone(),
                    base.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                ),
            };
            let layout = FolderLayout {
                image_size: d.image_size,
                channels: d.channels,
            };
            let (train, test) = load_folder_dataset(&root, &layout)?;
            folder_task(&train, &test, &name)?
        }
    };
    task.subsample(d.max_train, None, &mut rng);
    if cfg.mode == TrainingMode::Imbalanced {
        let how = match (cfg.anomaly_fraction, cfg.anomaly_per_subcategory) {
            (Some(f), _) => Injection::Fraction(f),
            (None, Some(k)) => Injection::PerSubcategory(k),
            (None, None) => return Err(Error::config("anomaly_fraction", "mode e needs an injection amount")),
        };
        task = inject_anomalies(task, how, &mut rng)?;
    }
    task.pool = Vec::new();
    task.subsample(None, d.max_test, &mut rng);
    resize_task(&mut task, cfg.image_side());
    Ok(task)
}

pub fn build_model<T: Real>(cfg: &RunConfig) -> Result<Vae<T>> {
    Vae::new(&cfg.encoder_spec(cfg.image_channels()), cfg.seed)
}

/// Fails with a descriptive message when `model` cannot consume the images of `cfg`.
pub fn check_compatible<T: Real>(model: &Vae<T>, cfg: &RunConfig) -> Result<()> {
    let want = cfg.encoder_spec(cfg.image_channels());
    if model.latent_dim() != want.latent_dim {
        return Err(Error::invalid(format!(
            "checkpoint has latent dimension {}, config asks for {}",
            model.latent_dim(),
            want.latent_dim
        )));
    }
    if model.input_shape() != want.input_shape {
        return Err(Error::invalid(format!(
            "checkpoint expects {:?} images, config produces {:?}",
            model.input_shape(),
            want.input_shape
        )));
    }
    Ok(())
}

pub struct TrainRun<T> {
    pub task: OneClassTask,
    pub fit: FitOutcome<T>,
    /// Test-set report of the best model, or of the final model when no evaluation ran.
    pub report: ScoreReport,
}

impl<T: Real> TrainRun<T> {
    pub fn selected_model(&self) -> &Vae<T> {
        self.fit.best.as_ref().map(|(_, _, m)| m).unwrap_or(&self.fit.model)
    }
}

/// Builds the task and model, trains, and scores the test set.
pub fn train_and_score<T: Real>(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainRun<T>> {
    cfg.validate()?;
    let task = build_task(cfg)?;
    let model = build_model::<T>(cfg)?;
    let artifacts = out_dir.map(|d| FitArtifacts { dir: d.to_path_buf() });
    let fit = fit(model, &task, cfg, artifacts.as_ref())?;
    let chosen = fit.best.as_ref().map(|(_, _, m)| m).unwrap_or(&fit.model);
    let report = score_records(chosen, &task.test, cfg.alpha_score, EVAL_BATCH, cfg.js_impl)?;
    Ok(TrainRun { task, fit, report })
}

/// Loads a checkpoint and checks it against `cfg`.
pub fn load_for<T: Real>(path: &Path, cfg: &RunConfig) -> Result<Checkpoint<T>> {
    let ck = checkpoint::load::<T>(path)?;
    check_compatible(&ck.model, cfg)?;
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataConfig;

    fn synthetic(mode: TrainingMode) -> RunConfig {
        let mut c = RunConfig::new(
            mode,
            DataConfig {
                kind: DataKind::Synthetic,
                dir: None,
                target_class: 1,
                category: None,
                image_size: 256,
                channels: 1,
                n_per_class: 20,
                classes: 3,
                max_train: None,
                max_test: None,
            },
        );
        c.latent_dim = 8;
        c.model.widths = vec![4, 4, 8, 8];
        c.epochs = 2;
        c.eval_every = 1;
        c
    }

    #[test]
    fn task_is_deterministic_and_counted() {
        let c = synthetic(TrainingMode::OneClass);
        let a = build_task(&c).unwrap();
        assert_eq!(a, build_task(&c).unwrap());
        assert_eq!(a.train.len(), 20);
        assert_eq!(a.test.iter().filter(|r| r.label == 1).count(), 20);
        assert_eq!(a.image_shape, (1, 32, 32));
        let mut e = synthetic(TrainingMode::Imbalanced);
        e.anomaly_fraction = Some(0.1);
        assert_eq!(build_task(&e).unwrap().train_anomaly_count(), 2);
    }

    #[test]
    fn compatibility_errors_name_the_mismatch() {
        let c = synthetic(TrainingMode::OneClass);
        let model = build_model::<f32>(&c).unwrap();
        check_compatible(&model, &c).unwrap();
        let mut d16 = c.clone();
        d16.latent_dim = 16;
        let msg = check_compatible(&model, &d16).unwrap_err().to_string();
        assert!(msg.contains("latent dimension 8"), "{msg}");
    }

    #[test]
    fn end_to_end_synthetic_run() {
        let c = synthetic(TrainingMode::Shifted);
        let run = train_and_score::<f32>(&c, None).unwrap();
        assert_eq!(run.fit.logs.len(), 2);
        assert!(run.report.auroc.is_some());
        assert_eq!(run.report.samples.len(), run.task.test.len());
    }
}
