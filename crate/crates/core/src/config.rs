//! Declarative run configuration: a TOML document plus dotted-path `key=value`
//! overrides, validated field by field before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dsa::DsaConfig;
use crate::error::{Error, Result};
use crate::latent::JsImpl;
use crate::losses::{LossWeights, ReconReduction, TrainingMode};
use crate::networks::{Backbone, EncoderSpec, DEFAULT_SMALL_WIDTHS, RESNET_WIDTH};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    /// Four IDX files in the MNIST naming scheme.
    Idx,
    /// One category folder with `train/good` and `test/<subcategory>`.
    Folder,
    /// Generated glyph corpus.
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Normal class for `idx` and `synthetic` data.
    #[serde(default)]
    pub target_class: u32,
    /// Category name for `folder` data; selects the standard augmentation table row.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_n_per_class")]
    pub n_per_class: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Random subset sizes for shorter runs; `None` keeps everything.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_train: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_test: Option<usize>,
}

fn default_image_size() -> usize {
    256
}
fn default_channels() -> usize {
    3
}
fn default_n_per_class() -> usize {
    200
}
fn default_classes() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_backbone")]
    pub backbone: Backbone,
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
}

fn default_backbone() -> Backbone {
    Backbone::SmallConv
}
fn default_widths() -> Vec<usize> {
    DEFAULT_SMALL_WIDTHS.to_vec()
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: default_backbone(),
            widths: default_widths(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: TrainingMode,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr0")]
    pub lr0: f64,
    #[serde(default = "d_t_max")]
    pub t_max: usize,
    #[serde(default = "d_lambda")]
    pub lambda_consist: f64,
    #[serde(default = "d_beta")]
    pub beta_anom: f64,
    #[serde(default = "d_alpha")]
    pub alpha_score: f64,
    #[serde(default)]
    pub js_impl: JsImpl,
    #[serde(default)]
    pub recon_reduction: ReconReduction,
    #[serde(default = "d_latent")]
    pub latent_dim: usize,
    #[serde(default)]
    pub seed: u64,
    /// Evaluate test AUROC every this many epochs (and after the last one).
    #[serde(default = "d_eval_every")]
    pub eval_every: usize,
    /// Mode e: fraction of the normal training count to inject as real anomalies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anomaly_fraction: Option<f64>,
    /// Mode e: anomalies to inject from every defect subcategory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anomaly_per_subcategory: Option<usize>,
    #[serde(default)]
    pub dsa: DsaConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub data: DataConfig,
}

fn d_epochs() -> usize {
    500
}
fn d_batch() -> usize {
    32
}
fn d_lr0() -> f64 {
    0.01
}
fn d_t_max() -> usize {
    50
}
fn d_lambda() -> f64 {
    0.1
}
fn d_beta() -> f64 {
    1.0
}
fn d_alpha() -> f64 {
    0.5
}
fn d_latent() -> usize {
    128
}
fn d_eval_every() -> usize {
    5
}

fn check_real(field: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
    if !v.is_finite() || v < lo || v > hi {
        return Err(Error::config(field, format!("must be finite and in [{lo}, {hi}], got {v}")));
    }
    Ok(())
}

impl RunConfig {
    /// A config with every default filled in, for the given mode and data.
    pub fn new(mode: TrainingMode, data: DataConfig) -> Self {
        Self {
            mode,
            epochs: d_epochs(),
            batch_size: d_batch(),
            lr0: d_lr0(),
            t_max: d_t_max(),
            lambda_consist: d_lambda(),
            beta_anom: d_beta(),
            alpha_score: d_alpha(),
            js_impl: JsImpl::default(),
            recon_reduction: ReconReduction::default(),
            latent_dim: d_latent(),
            seed: 0,
            eval_every: d_eval_every(),
            anomaly_fraction: None,
            anomaly_per_subcategory: None,
            dsa: DsaConfig::default(),
            model: ModelConfig::default(),
            data,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_consist: self.lambda_consist,
            beta_anom: self.beta_anom,
            recon_reduction: self.recon_reduction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2 (batch normalization)"));
        }
        check_real("lr0", self.lr0, 0.0, f64::MAX)?;
        if self.t_max == 0 {
            return Err(Error::config("t_max", "must be positive"));
        }
        check_real("lambda_consist", self.lambda_consist, 0.0, f64::MAX)?;
        check_real("beta_anom", self.beta_anom, 0.0, f64::MAX)?;
        check_real("alpha_score", self.alpha_score, 0.0, 1.0)?;
        if self.latent_dim < 8 {
            return Err(Error::config("latent_dim", "must be at least 8"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be positive"));
        }
        self.dsa.validate()?;
        match self.mode {
            TrainingMode::Imbalanced => match (self.anomaly_fraction, self.anomaly_per_subcategory) {
                (Some(f), None) => check_real("anomaly_fraction", f, 0.0, 1.0)?,
                (None, Some(_)) => {}
                _ => {
                    return Err(Error::config(
                        "anomaly_fraction",
                        "mode e needs exactly one of anomaly_fraction or anomaly_per_subcategory",
                    ))
                }
            },
            _ => {
                if self.anomaly_fraction.is_some() || self.anomaly_per_subcategory.is_some() {
                    return Err(Error::config("anomaly_fraction", "only mode e injects real anomalies"));
                }
            }
        }
        if self.mode == TrainingMode::Shifted && self.dsa.probability == 0.0 {
            return Err(Error::config("dsa.probability", "mode d needs a positive DSA probability"));
        }
        let d = &self.data;
        match d.kind {
            DataKind::Idx | DataKind::Folder if d.dir.is_none() => {
                return Err(Error::config("data.dir", "required for idx and folder data"))
            }
            DataKind::Synthetic if d.n_per_class == 0 || d.classes < 2 => {
                return Err(Error::config("data.classes", "synthetic data needs n_per_class ≥ 1 and classes ≥ 2"))
            }
            DataKind::Synthetic if d.target_class as usize >= d.classes => {
                return Err(Error::config("data.target_class", "must be below data.classes"))
            }
            _ => {}
        }
        if d.channels != 1 && d.channels != 3 {
            return Err(Error::config("data.channels", "must be 1 or 3"));
        }
        let side = self.image_side();
        self.encoder_spec(self.image_channels())
            .validate()
            .map_err(|e| Error::config("model", format!("{e} (image side {side})")))?;
        Ok(())
    }

    pub fn image_side(&self) -> usize {
        match self.data.kind {
            DataKind::Folder => self.data.image_size,
            DataKind::Idx | DataKind::Synthetic => 32,
        }
    }

    pub fn image_channels(&self) -> usize {
        match self.data.kind {
            DataKind::Folder => self.data.channels,
            DataKind::Idx | DataKind::Synthetic => 1,
        }
    }

    pub fn encoder_spec(&self, channels: usize) -> EncoderSpec {
        let side = self.image_side();
        let widths = match self.model.backbone {
            Backbone::SmallConv => self.model.widths.clone(),
            Backbone::Resnet18W64 => vec![RESNET_WIDTH; 4],
        };
        EncoderSpec {
            input_shape: (channels, side, side),
            latent_dim: self.latent_dim,
            backbone: self.model.backbone,
            widths,
        }
    }

    /// Parses a TOML document, applies `overrides`, and validates the result.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config("<file>", e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| {
            let msg = e.message().to_string();
            let field = msg.split('`').nth(1).unwrap_or("<config>").to_string();
            Error::config(field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    /// The fully resolved config as TOML; loading it reproduces `self` exactly.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<snapshot>", e.to_string()))
    }
}

/// Sets `a.b.c=value`, parsing `value` as a TOML literal and falling back to a string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty path segment in override"));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{part}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
