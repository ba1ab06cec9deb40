//! The training configuration document.
//!
//! A config file is TOML with the sections below. An optional top-level
//! `preset` key picks the base values; every key given in the file overrides
//! the preset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetKind, DatasetSpec};
use crate::error::{Error, Result};
use crate::frame_core::{AugmentConfig, Menu};
use crate::losses::{LossWeights, Toggles};
use crate::nets::{ModelConfig, ProjectionConfig};
use crate::optim::RAdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Radam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning-rate factor applied after every epoch.
    pub lr_decay: f64,
    /// Global gradient-norm ceiling; absent means no clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Radam,
            lr: 1e-4,
            beta1: 0.0,
            beta2: 0.999,
            eps: 1e-8,
            lr_decay: 0.95,
            grad_clip: None,
        }
    }
}

impl OptimConfig {
    pub fn radam(&self) -> RAdamConfig {
        RAdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// Learning rate in effect after `epoch` completed epochs.
    pub fn lr_at(&self, epoch: u64) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub epochs: u64,
    pub frame_batch: usize,
    pub event_batch: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Evaluate on the validation events after every epoch.
    pub validate: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            frame_batch: 7,
            event_batch: 7,
            seed: 0,
            precision: Precision::F32,
            validate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub frames: AugmentConfig,
    pub events: AugmentConfig,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self {
            frames: AugmentConfig::frame_default(),
            events: AugmentConfig::event_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write a checkpoint after every epoch.
    pub checkpoints: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            checkpoints: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: String,
    pub data: DatasetSpec,
    pub model: ModelConfig,
    pub projection: ProjectionConfig,
    pub optim: OptimConfig,
    pub train: RunConfig,
    pub weights: LossWeights,
    pub toggles: Toggles,
    pub augment: AugmentSection,
    pub output: OutputConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::caltech101()
    }
}

pub const PRESETS: [&str; 3] = ["caltech101", "cifar10", "toy"];

impl TrainConfig {
    pub fn caltech101() -> Self {
        Self {
            preset: "caltech101".into(),
            data: DatasetSpec {
                kind: DatasetKind::Caltech101Pair,
                root: PathBuf::from("data/caltech101"),
                height: 224,
                width: 224,
                bins: 5,
                classes: Some(101),
                ..DatasetSpec::default()
            },
            model: ModelConfig::resnet18(),
            projection: ProjectionConfig::default(),
            optim: OptimConfig::default(),
            train: RunConfig::default(),
            weights: LossWeights::default(),
            toggles: Toggles::default(),
            augment: AugmentSection::default(),
            output: OutputConfig::default(),
        }
    }

    pub fn cifar10() -> Self {
        let mut c = Self::caltech101();
        c.preset = "cifar10".into();
        c.data.kind = DatasetKind::Cifar10Pair;
        c.data.root = PathBuf::from("data/cifar10");
        c.data.classes = Some(10);
        c.train.epochs = 70;
        c.train.frame_batch = 21;
        c.train.event_batch = 21;
        c
    }

    /// Desk-scale settings for the synthetic benchmark.
    pub fn toy() -> Self {
        let mut c = Self::caltech101();
        c.preset = "toy".into();
        c.data = DatasetSpec::default();
        c.model = ModelConfig::toy();
        c.train.epochs = 30;
        c.train.frame_batch = 10;
        c.train.event_batch = 10;
        c.optim.lr = 3e-3;
        c.optim.beta2 = 0.99;
        c.weights.w_decoder = 10.0;
        c.weights.w_gan_event = 0.1;
        c.augment.frames = AugmentConfig {
            flip: true,
            crop: true,
            crop_scale: [0.8, 1.0],
            affine: true,
            ..AugmentConfig::identity(Menu::Frame)
        };
        c.output.dir = PathBuf::from("runs/toy");
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "caltech101" => Ok(Self::caltech101()),
            "cifar10" => Ok(Self::cifar10()),
            "toy" => Ok(Self::toy()),
            _ => Err(Error::Config(format!(
                "unknown preset `{name}` (expected one of {})",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Parses a config document over its preset and validates it.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let preset = match doc.get("preset") {
            Some(toml::Value::String(s)) => s.clone(),
            Some(_) => return Err(Error::Config("`preset` must be a string".into())),
            None => "caltech101".to_string(),
        };
        let base = toml::Table::try_from(Self::preset(&preset)?).map_err(|e| Error::Config(e.to_string()))?;
        let merged = merge(base, doc);
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate().map_err(as_config)?;
        self.model.validate()?;
        self.projection.validate()?;
        self.weights.validate()?;
        self.augment.frames.validate().map_err(as_config)?;
        self.augment.events.validate().map_err(as_config)?;
        if self.augment.frames.menu != Menu::Frame || self.augment.events.menu != Menu::Event {
            return Err(Error::Config("augment.frames and augment.events must use their own menus".into()));
        }
        self.optim.radam().validate()?;
        if !(self.optim.lr > 0.0 && self.optim.lr.is_finite()) {
            return Err(Error::Config(format!("optim.lr must be positive, got {}", self.optim.lr)));
        }
        if !(self.optim.lr_decay > 0.0 && self.optim.lr_decay <= 1.0) {
            return Err(Error::Config("optim.lr_decay must lie in (0, 1]".into()));
        }
        if let Some(c) = self.optim.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("optim.grad_clip must be positive".into()));
            }
        }
        if self.train.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if self.train.frame_batch == 0 || self.train.event_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

fn merge(mut base: toml::Table, over: toml::Table) -> toml::Table {
    for (k, v) in over {
        match (base.remove(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                base.insert(k, toml::Value::Table(merge(b, o)));
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}
