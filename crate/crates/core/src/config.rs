//! Run configuration read from TOML. Every field has a default, so an empty
//! file is a valid desk-scale configuration once a training directory is set.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::shave_for;
use crate::model::{Backend, ModelConfig, Preset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ShavePolicy {
    /// `"ceil"`: shave `ceil(r)` pixels.
    Named(String),
    Fixed(usize),
}

impl Default for ShavePolicy {
    fn default() -> Self {
        ShavePolicy::Named("ceil".into())
    }
}

impl ShavePolicy {
    pub fn pixels(&self, scale: f64) -> usize {
        match self {
            ShavePolicy::Fixed(n) => *n,
            ShavePolicy::Named(_) => shave_for(scale),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Preset,
    pub backend: Backend,
    pub include_scale: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: Preset::Desk,
            backend: Backend::Meta,
            include_scale: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub patch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub learning_rate: f64,
    pub halve_every: usize,
    pub seed: u64,
    pub deterministic: bool,
    pub output_dir: PathBuf,
    pub checkpoint_every: usize,
    pub val_every: usize,
    pub val_scales: Vec<f64>,
    pub resume: Option<PathBuf>,
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            patch_size: 50,
            epochs: 1000,
            steps_per_epoch: 1000,
            learning_rate: 1e-4,
            halve_every: 200,
            seed: 0,
            deterministic: false,
            output_dir: PathBuf::from("runs/default"),
            checkpoint_every: 1,
            val_every: 1,
            val_scales: vec![2.0],
            resume: None,
            prefetch: 4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub shave: ShavePolicy,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(v) => Error::Config(v.into_iter().map(|m| format!("{}: {m}", path.display())).collect()),
            e => e,
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut c = ModelConfig::preset(self.model.preset, self.model.backend);
        c.weight_net.include_scale = self.model.include_scale;
        c
    }

    /// Checks every field and reports all problems together. With
    /// `training` set, a training directory is required.
    pub fn validate(&self, training: bool) -> Result<()> {
        let mut errs = Vec::new();
        let t = &self.train;
        if training && self.data.train_dir.is_none() {
            errs.push("data.train_dir is required for training".to_string());
        }
        for (dir, key) in [(&self.data.train_dir, "data.train_dir"), (&self.data.val_dir, "data.val_dir")] {
            if let Some(d) = dir {
                if training && !d.is_dir() {
                    errs.push(format!("{key} {} is not a directory", d.display()));
                }
            }
        }
        for (v, key) in [
            (t.batch_size, "train.batch_size"),
            (t.patch_size, "train.patch_size"),
            (t.epochs, "train.epochs"),
            (t.steps_per_epoch, "train.steps_per_epoch"),
            (t.halve_every, "train.halve_every"),
            (t.checkpoint_every, "train.checkpoint_every"),
            (t.val_every, "train.val_every"),
        ] {
            if v == 0 {
                errs.push(format!("{key} must be positive"));
            }
        }
        if t.patch_size != 0 && t.patch_size < 3 {
            errs.push(format!("train.patch_size {} is smaller than the 3x3 kernel", t.patch_size));
        }
        if !(t.learning_rate.is_finite() && t.learning_rate > 0.0) {
            errs.push(format!("train.learning_rate must be positive, got {}", t.learning_rate));
        }
        for &s in &t.val_scales {
            if !(s.is_finite() && s > 0.0) {
                errs.push(format!("train.val_scales contains non-positive scale {s}"));
            }
        }
        if let ShavePolicy::Named(n) = &self.eval.shave {
            if n != "ceil" {
                errs.push(format!("eval.shave must be \"ceil\" or an integer, got \"{n}\""));
            }
        }
        if let Err(Error::Config(e)) = self.model_config().validate() {
            errs.extend(e);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}
