//! Flat `key = value` configuration with `[section]` headers.
//!
//! ```text
//! seed = 7
//! [model]
//! architecture = tiny_cnn
//! [train]
//! task = three_way
//! steps = 2000
//! ```
//!
//! Keys are addressed as `section.key`; keys before the first section are
//! top-level. Later assignments override earlier ones.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BackboneConfig;
use crate::score::Regularization;
use crate::train::{FinetuneSchedule, Level, Task, TrainConfig};

/// Parsed `section.key -> value` pairs in key order.
pub type ConfigMap = BTreeMap<String, String>;

pub fn parse_config(text: &str) -> Result<ConfigMap> {
    let mut map = ConfigMap::new();
    let mut section = String::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        let full = if section.is_empty() {
            key.to_string()
        } else {
            format!("{section}.{key}")
        };
        map.insert(full, v.trim().trim_matches('"').to_string());
    }
    Ok(map)
}

pub fn read_config(path: &Path) -> Result<ConfigMap> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Density estimator for whole-image embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Estimator {
    Gde { regularization: Regularization },
    Kde { bandwidth: Option<f64> },
}

impl Default for Estimator {
    fn default() -> Self {
        Estimator::Gde {
            regularization: Regularization::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// One AUC over every test pixel.
    Pooled,
    /// Mean of per-image AUCs over images with both classes present.
    PerImage,
}

/// Dense patch scoring settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizeConfig {
    pub enabled: bool,
    pub patch_size: usize,
    pub stride: usize,
    /// Gaussian kernel width; defaults to `patch_size / 4`.
    pub sigma: Option<f64>,
    /// One Gaussian per grid location instead of a shared one.
    pub per_location: bool,
    pub pooling: Pooling,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            patch_size: 32,
            stride: 4,
            sigma: None,
            per_location: false,
            pooling: Pooling::Pooled,
        }
    }
}

impl LocalizeConfig {
    pub fn sigma(&self) -> f64 {
        self.sigma
            .unwrap_or_else(|| crate::localize::default_sigma(self.patch_size))
    }
}

/// Everything one experiment needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Side length images are resized to on load.
    pub working_size: usize,
    pub model: BackboneConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneSchedule,
    pub estimator: Estimator,
    pub localize: LocalizeConfig,
    pub n_seeds: usize,
    pub ensemble: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            working_size: 256,
            model: BackboneConfig::resnet18_like(256),
            train: TrainConfig::default(),
            finetune: FinetuneSchedule::default(),
            estimator: Estimator::default(),
            localize: LocalizeConfig::default(),
            n_seeds: 1,
            ensemble: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected a boolean, got {value:?}"
        ))),
    }
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.is_empty() || value == "none" || value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl ExperimentConfig {
    /// Desk-scale preset: tiny network on 64x64 images.
    pub fn desk() -> Self {
        let train = TrainConfig {
            steps: 2000,
            batch_size: 48,
            ..TrainConfig::new(Task::ThreeWay)
        };
        Self {
            working_size: 64,
            model: BackboneConfig::tiny_cnn(64, 128),
            train,
            ..Self::default()
        }
    }

    /// Applies every entry of `map`.
    pub fn apply_map(&mut self, map: &ConfigMap) -> Result<()> {
        for (k, v) in map {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Sets one `section.key` value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "working_size" | "data.working_size" => self.working_size = parse(key, v)?,
            "model.architecture" => self.model.architecture = parse(key, v)?,
            "model.input_size" => self.model.input_size = parse(key, v)?,
            "model.embedding_dim" => self.model.embedding_dim = parse(key, v)?,
            "model.pretrained_weights" => {
                self.model.pretrained_weights = parse_opt::<PathBuf>(key, v)?
            }
            "train.task" => {
                let task: Task = v.parse()?;
                if t.task != task && t.batch_size == t.task.default_batch_size() {
                    t.batch_size = task.default_batch_size();
                }
                t.task = task;
            }
            "train.level" => t.level = v.parse()?,
            "train.patch_size" => t.patch_size = parse(key, v)?,
            "train.steps" => t.steps = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.momentum" => t.momentum = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.schedule" => t.schedule = v.parse()?,
            "train.log_every" => t.log_every = parse(key, v)?,
            "augment.area_ratio_min" => t.augment.area_ratio.0 = parse(key, v)?,
            "augment.area_ratio_max" => t.augment.area_ratio.1 = parse(key, v)?,
            "augment.aspect_ratio_min" => t.augment.aspect_ratio.0 = parse(key, v)?,
            "augment.aspect_ratio_max" => t.augment.aspect_ratio.1 = parse(key, v)?,
            "augment.jitter" => t.augment.jitter = parse(key, v)?,
            "augment.scar_width_min" => t.augment.scar_width.0 = parse(key, v)?,
            "augment.scar_width_max" => t.augment.scar_width.1 = parse(key, v)?,
            "augment.scar_length_min" => t.augment.scar_length.0 = parse(key, v)?,
            "augment.scar_length_max" => t.augment.scar_length.1 = parse(key, v)?,
            "augment.scar_rotation" => t.augment.scar_rotation = parse(key, v)?,
            "augment.confetti_shift" => t.augment.confetti_shift = parse(key, v)?,
            "preprocess.max_translation" => t.preprocess.max_translation = parse(key, v)?,
            "preprocess.jitter" => t.preprocess.jitter = parse(key, v)?,
            "finetune.head_only_epochs" => self.finetune.head_only_epochs = parse(key, v)?,
            "finetune.head_lr" => self.finetune.head_lr = parse(key, v)?,
            "finetune.full_epochs" => self.finetune.full_epochs = parse(key, v)?,
            "finetune.full_lr" => self.finetune.full_lr = parse(key, v)?,
            "finetune.steps_per_epoch" => self.finetune.steps_per_epoch = parse(key, v)?,
            "score.estimator" => {
                self.estimator = match v {
                    "gde" => Estimator::Gde {
                        regularization: Regularization::default(),
                    },
                    "gde_ledoit_wolf" | "ledoit_wolf" => Estimator::Gde {
                        regularization: Regularization::LedoitWolf,
                    },
                    "kde" => Estimator::Kde { bandwidth: None },
                    other => {
                        return Err(Error::Config(format!("{key}: unknown estimator {other:?}")))
                    }
                }
            }
            "score.ridge_scale" => match &mut self.estimator {
                Estimator::Gde { regularization } => {
                    *regularization = Regularization::Ridge {
                        scale: parse(key, v)?,
                    }
                }
                Estimator::Kde { .. } => {
                    return Err(Error::Config(format!("{key} requires the gde estimator")))
                }
            },
            "score.kde_bandwidth" => match &mut self.estimator {
                Estimator::Kde { bandwidth } => *bandwidth = parse_opt(key, v)?,
                Estimator::Gde { .. } => {
                    return Err(Error::Config(format!("{key} requires the kde estimator")))
                }
            },
            "localize.enabled" => self.localize.enabled = parse_bool(key, v)?,
            "localize.patch_size" => self.localize.patch_size = parse(key, v)?,
            "localize.stride" => self.localize.stride = parse(key, v)?,
            "localize.sigma" => self.localize.sigma = parse_opt(key, v)?,
            "localize.per_location" => self.localize.per_location = parse_bool(key, v)?,
            "localize.pooling" | "eval.pixel_pooling" => {
                self.localize.pooling = match v {
                    "pooled" => Pooling::Pooled,
                    "per_image" => Pooling::PerImage,
                    other => {
                        return Err(Error::Config(format!("{key}: unknown pooling {other:?}")))
                    }
                }
            }
            "eval.n_seeds" | "experiment.n_seeds" => self.n_seeds = parse(key, v)?,
            "eval.ensemble" | "experiment.ensemble" => self.ensemble = parse_bool(key, v)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown configuration key {other:?}"
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.n_seeds == 0 {
            return Err(Error::Config("n_seeds must be at least 1".into()));
        }
        if self.working_size < crate::augment::MIN_IMAGE_SIDE {
            return Err(Error::Config(format!(
                "working_size {} is too small",
                self.working_size
            )));
        }
        if self.train.level == Level::Patch && self.train.patch_size > self.working_size {
            return Err(Error::Config(format!(
                "train.patch_size {} exceeds working_size {}",
                self.train.patch_size, self.working_size
            )));
        }
        let a = &self.train.augment;
        if !(0.0 < a.area_ratio.0 && a.area_ratio.0 < a.area_ratio.1 && a.area_ratio.1 <= 1.0) {
            return Err(Error::Config(format!(
                "invalid area ratio range {:?}",
                a.area_ratio
            )));
        }
        if !(0.0 < a.aspect_ratio.0 && a.aspect_ratio.0 < a.aspect_ratio.1) {
            return Err(Error::Config(format!(
                "invalid aspect ratio range {:?}",
                a.aspect_ratio
            )));
        }
        if a.scar_width.0 > a.scar_width.1
            || a.scar_length.0 > a.scar_length.1
            || a.scar_width.0 == 0
        {
            return Err(Error::Config("invalid scar size ranges".into()));
        }
        if self.localize.enabled || self.train.level == Level::Patch {
            crate::localize::grid_len(
                self.working_size,
                self.localize.patch_size,
                self.localize.stride,
            )?;
        }
        Ok(())
    }

    /// Training configuration of the run for `seed`.
    pub fn train_for_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;

    #[test]
    fn parses_sections_and_comments() {
        let map = parse_config("seed = 3 # root\n\n[train]\nlr = 0.1\ntask = \"binary_cutpaste\"\n[model]\narchitecture=tiny_cnn\n").unwrap();
        assert_eq!(map["seed"], "3");
        assert_eq!(map["train.lr"], "0.1");
        assert_eq!(map["train.task"], "binary_cutpaste");
        let mut cfg = ExperimentConfig::default();
        cfg.apply_map(&map).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.lr, 0.1);
        assert_eq!(cfg.train.task, Task::BinaryCutpaste);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.model.architecture, Architecture::TinyCnn);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(parse_config("just words").is_err());
        let mut cfg = ExperimentConfig::default();
        assert!(matches!(cfg.set("train.nope", "1"), Err(Error::Config(_))));
        assert!(matches!(cfg.set("train.lr", "fast"), Err(Error::Config(_))));
        assert!(cfg.set("score.kde_bandwidth", "1").is_err());
        cfg.set("score.estimator", "kde").unwrap();
        cfg.set("score.kde_bandwidth", "0.5").unwrap();
        assert_eq!(
            cfg.estimator,
            Estimator::Kde {
                bandwidth: Some(0.5)
            }
        );
    }

    #[test]
    fn presets_validate() {
        ExperimentConfig::default().validate().unwrap();
        ExperimentConfig::desk().validate().unwrap();
        let mut cfg = ExperimentConfig::desk();
        cfg.localize.enabled = true;
        cfg.localize.stride = 5;
        assert!(cfg.validate().is_err());
    }
}
