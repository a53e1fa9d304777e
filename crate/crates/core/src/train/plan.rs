use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::eval::CropScale;
use crate::model::{count_parameters, ClipConfig, TowerConfig, DEFAULT_TEMPERATURE};
use crate::optim::OptimConfig;
use crate::train::DistillOptions;

/// Which loss a stage optimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Distill,
    Contrastive,
}

/// One block of training on a fixed recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainStage {
    pub name: String,
    pub objective: Objective,
    pub samples_to_see: u64,
    pub batch_size: usize,
    /// Fraction of patch tokens removed from the student input
    /// (contrastive stages only).
    #[serde(default)]
    pub patch_dropout: f64,
    /// Fraction of patch positions whose teacher features are regressed
    /// (distillation stages only).
    #[serde(default = "default_mask_ratio")]
    pub mask_ratio: f64,
    pub resolution: usize,
    /// Corpus split name to sampling weight.
    #[serde(default = "default_mix")]
    pub data_mix: BTreeMap<String, f64>,
    #[serde(default)]
    pub warmup_steps: u64,
    /// Random resized crop area range; `None` disables augmentation.
    #[serde(default)]
    pub augment: Option<CropScale>,
}

pub const DEFAULT_MASK_RATIO: f64 = 0.4;

fn default_mask_ratio() -> f64 {
    DEFAULT_MASK_RATIO
}

fn default_mix() -> BTreeMap<String, f64> {
    BTreeMap::from([("train".to_string(), 1.0)])
}

impl TrainStage {
    /// A stage over the `train` split with no augmentation or warmup.
    pub fn new(name: &str, objective: Objective, samples_to_see: u64, batch_size: usize, resolution: usize) -> Self {
        Self {
            name: name.to_string(),
            objective,
            samples_to_see,
            batch_size,
            patch_dropout: 0.0,
            mask_ratio: DEFAULT_MASK_RATIO,
            resolution,
            data_mix: default_mix(),
            warmup_steps: 0,
            augment: None,
        }
    }

    /// Optimiser steps: `ceil(samples_to_see / batch_size)`.
    pub fn steps(&self) -> u64 {
        self.samples_to_see.div_ceil(self.batch_size.max(1) as u64)
    }

    /// Checks the stage on its own; `key` prefixes error messages.
    pub fn validate(&self, key: &str) -> Result<()> {
        if self.samples_to_see == 0 {
            bail!(Config, "{key}.samples_to_see must be positive");
        }
        if self.batch_size == 0 {
            bail!(Config, "{key}.batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.patch_dropout) {
            bail!(Config, "{key}.patch_dropout must lie in [0, 1), got {}", self.patch_dropout);
        }
        if self.objective == Objective::Distill && self.patch_dropout != 0.0 {
            bail!(Config, "{key}.patch_dropout applies to contrastive stages only");
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            bail!(Config, "{key}.mask_ratio must lie in (0, 1), got {}", self.mask_ratio);
        }
        if self.resolution == 0 {
            bail!(Config, "{key}.resolution must be positive");
        }
        if self.data_mix.is_empty() {
            bail!(Config, "{key}.data_mix is empty");
        }
        for (name, w) in &self.data_mix {
            if !(*w > 0.0 && w.is_finite()) {
                bail!(Config, "{key}.data_mix.{name} must be a positive weight, got {w}");
            }
        }
        if self.warmup_steps >= self.steps() && self.warmup_steps > 0 {
            bail!(Config, "{key}.warmup_steps {} must be below the stage's {} steps", self.warmup_steps, self.steps());
        }
        if let Some(c) = self.augment {
            if !(c.min > 0.0 && c.min <= c.max && c.max <= 1.0) {
                bail!(Config, "{key}.augment range ({}, {}) must lie in (0, 1]", c.min, c.max);
            }
        }
        Ok(())
    }
}

/// Checks a run of contrastive stages sharing one schedule: only the first
/// stage may warm up, and every stage must match the vision resolution.
pub fn validate_clip_stages(stages: &[TrainStage], key: &str, resolution: usize) -> Result<()> {
    if stages.is_empty() {
        bail!(Config, "{key} needs at least one contrastive stage");
    }
    for (i, s) in stages.iter().enumerate() {
        let k = format!("{key}[{i}]");
        s.validate(&k)?;
        if s.objective != Objective::Contrastive {
            bail!(Config, "{k}.objective must be contrastive");
        }
        if i > 0 && s.warmup_steps != 0 {
            bail!(Config, "{k}.warmup_steps must be 0: warmup belongs to the first stage of the schedule");
        }
        if s.resolution != resolution {
            bail!(Config, "{k}.resolution {} differs from the vision tower's {resolution}", s.resolution);
        }
    }
    let total: u64 = stages.iter().map(TrainStage::steps).sum();
    if stages[0].warmup_steps >= total {
        bail!(Config, "{key}[0].warmup_steps must be below the {total} scheduled steps");
    }
    Ok(())
}

/// The initial teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedModel {
    #[serde(default = "default_seed_name")]
    pub name: String,
    pub vision: TowerConfig,
    pub text: TowerConfig,
    /// Contrastive stages training the seed from scratch. Empty means the
    /// seed is supplied by the caller.
    #[serde(default)]
    pub stages: Vec<TrainStage>,
}

fn default_seed_name() -> String {
    "seed".to_string()
}

/// One weak-to-strong step: distil a larger vision tower from the teacher,
/// then train it contrastively next to the teacher's text tower.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generation {
    /// Output name; later generations refer to it as their teacher.
    pub name: String,
    pub teacher: String,
    pub student: TowerConfig,
    pub distill: TrainStage,
    pub clip_stages: Vec<TrainStage>,
    /// Replaces the plan's optimiser settings for this generation, e.g. a
    /// lower text learning rate once the text tower is pretrained.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optim: Option<OptimConfig>,
}

/// The whole closed loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CyclePlan {
    pub seed: u64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub temperature_learnable: bool,
    #[serde(default)]
    pub optim: OptimConfig,
    /// In-batch retrieval accuracy is logged every this many steps.
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default)]
    pub distillation: DistillOptions,
    pub seed_model: SeedModel,
    pub generations: Vec<Generation>,
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

fn default_log_every() -> u64 {
    10
}

impl CyclePlan {
    pub fn seed_clip_config(&self) -> ClipConfig {
        ClipConfig {
            vision: self.seed_model.vision.clone(),
            text: self.seed_model.text.clone(),
            temperature: self.temperature,
            temperature_learnable: self.temperature_learnable,
        }
    }

    /// The model generation `g` produces: its student next to the seed's
    /// text tower, which every generation inherits unchanged in shape.
    pub fn generation_clip_config(&self, g: usize) -> ClipConfig {
        ClipConfig { vision: self.generations[g].student.clone(), ..self.seed_clip_config() }
    }

    /// Checks wiring, growth and every stage. Messages name the offending key.
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            bail!(Config, "temperature must be positive, got {}", self.temperature);
        }
        if self.log_every == 0 {
            bail!(Config, "log_every must be positive");
        }
        validate_optim(&self.optim, "optim")?;
        let seed_cfg = self.seed_clip_config();
        seed_cfg.validate().map_err(|e| prefix_error(e, "seed_model"))?;
        if !self.seed_model.stages.is_empty() {
            validate_clip_stages(&self.seed_model.stages, "seed_model.stages", seed_cfg.vision.input_resolution_or_zero())?;
        }
        if self.generations.is_empty() {
            bail!(Config, "generations is empty");
        }
        let mut names: Vec<&str> = alloc::vec![self.seed_model.name.as_str()];
        let mut teacher_params = count_parameters(&self.seed_model.vision);
        for (g, gen) in self.generations.iter().enumerate() {
            let key = format!("generations[{g}]");
            let expected = names[g];
            if gen.teacher != expected {
                bail!(Config, "{key}.teacher is `{}` but must be `{expected}`, the previous output", gen.teacher);
            }
            if names.contains(&gen.name.as_str()) {
                bail!(Config, "{key}.name `{}` is already used", gen.name);
            }
            self.generation_clip_config(g).validate().map_err(|e| prefix_error(e, &format!("{key}.student")))?;
            let params = count_parameters(&gen.student);
            if params <= teacher_params {
                bail!(Config, "{key}.student has {params} parameters, not more than its teacher's {teacher_params}");
            }
            let res = gen.student.input_resolution_or_zero();
            gen.distill.validate(&format!("{key}.distill"))?;
            if gen.distill.objective != Objective::Distill {
                bail!(Config, "{key}.distill.objective must be distill");
            }
            if gen.distill.resolution != res {
                bail!(Config, "{key}.distill.resolution {} differs from the student's {res}", gen.distill.resolution);
            }
            validate_clip_stages(&gen.clip_stages, &format!("{key}.clip_stages"), res)?;
            if let Some(o) = &gen.optim {
                validate_optim(o, &format!("{key}.optim"))?;
            }
            names.push(&gen.name);
            teacher_params = params;
        }
        Ok(())
    }
}

fn validate_optim(o: &OptimConfig, key: &str) -> Result<()> {
    o.hyper.validate().map_err(|e| prefix_error(e, &format!("{key}.hyper")))?;
    for (k, v) in [("vision_layer_decay", o.vision_layer_decay), ("text_layer_decay", o.text_layer_decay)] {
        if !(v > 0.0 && v <= 1.0) {
            bail!(Config, "{key}.{k} must lie in (0, 1], got {v}");
        }
    }
    for (k, v) in [("vision_peak_lr", o.vision_peak_lr), ("text_peak_lr", o.text_peak_lr)] {
        if !(v >= 0.0) {
            bail!(Config, "{key}.{k} must be non-negative, got {v}");
        }
    }
    Ok(())
}

fn prefix_error(e: crate::Error, key: &str) -> crate::Error {
    use crate::Error::*;
    match e {
        Config(m) => Config(format!("{key}: {m}")),
        Dimension(m) => Dimension(format!("{key}: {m}")),
        other => other,
    }
}

impl TowerConfig {
    pub(crate) fn input_resolution_or_zero(&self) -> usize {
        match self.input {
            crate::model::TowerInput::Vision { input_resolution, .. } => input_resolution,
            crate::model::TowerInput::Text { .. } => 0,
        }
    }
}

/// Deterministic sub-seed for a named purpose.
pub fn derive_seed(base: u64, purpose: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(purpose.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes([d[0], d[1], d[2], d[3], d[4], d[5], d[6], d[7]])
}
