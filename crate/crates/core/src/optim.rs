//! LAMB with bias-corrected moments, warmup + cosine-to-zero schedule and
//! layer-wise learning-rate decay.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::model::{TowerConfig, TowerInput, TowerWeights};
use crate::tensor::Tensor;

/// LAMB hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LambHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for LambHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, epsilon: 1e-6, weight_decay: 0.0 }
    }
}

impl LambHyper {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            bail!(Config, "betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2);
        }
        if !(self.epsilon > 0.0) {
            bail!(Config, "epsilon must be positive, got {}", self.epsilon);
        }
        if !(self.weight_decay >= 0.0) {
            bail!(Config, "weight_decay must be non-negative, got {}", self.weight_decay);
        }
        Ok(())
    }
}

/// Adam moments per parameter name plus the shared step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LambState {
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    step: u64,
}

/// One parameter tensor to update in a [`LambState::step`] call.
pub struct LambUpdate<'a> {
    pub name: &'a str,
    pub param: &'a mut Tensor,
    pub grad: &'a Tensor,
    pub lr: f64,
}

impl LambState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Optimiser steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// All moments in name order, for serialisation.
    pub fn iter_moments(&self) -> impl Iterator<Item = (&str, &[f64], &[f64])> {
        self.moments.iter().map(|(k, (m, v))| (k.as_str(), m.as_slice(), v.as_slice()))
    }

    /// Rebuilds a state from serialised parts.
    pub fn from_parts(step: u64, moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>) -> Self {
        Self { moments, step }
    }

    /// Applies one LAMB step to every entry. Nothing is modified when any
    /// gradient is non-finite or a shape disagrees.
    pub fn step(&mut self, hyper: &LambHyper, updates: &mut [LambUpdate<'_>]) -> Result<()> {
        hyper.validate()?;
        for u in updates.iter() {
            if u.param.shape() != u.grad.shape() {
                bail!(Dimension, "`{}`: gradient {:?} does not match parameter {:?}", u.name, u.grad.shape(), u.param.shape());
            }
            if !u.grad.is_finite() {
                bail!(Numeric, "non-finite gradient for `{}`", u.name);
            }
            if !(u.lr >= 0.0) {
                bail!(Config, "learning rate for `{}` must be non-negative, got {}", u.name, u.lr);
            }
            if let Some((m, _)) = self.moments.get(u.name) {
                if m.len() != u.param.numel() {
                    bail!(Dimension, "`{}`: optimiser state holds {} values, parameter {}", u.name, m.len(), u.param.numel());
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(hyper.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(hyper.beta2, t as f64);
        for u in updates.iter_mut() {
            let n = u.param.numel();
            let (m, v) = self
                .moments
                .entry(String::from(u.name))
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let mut r = Vec::with_capacity(n);
            for i in 0..n {
                let g = u.grad.data()[i];
                m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
                v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                r.push(m_hat / (libm::sqrt(v_hat) + hyper.epsilon) + hyper.weight_decay * u.param.data()[i]);
            }
            let phi = trust_ratio(u.param.data(), &r);
            let scale = u.lr * phi;
            for (p, ri) in u.param.data_mut().iter_mut().zip(&r) {
                *p -= scale * ri;
            }
        }
        Ok(())
    }
}

/// `‖p‖₂ / ‖r‖₂`, or 1 when either norm is zero.
pub fn trust_ratio(param: &[f64], update: &[f64]) -> f64 {
    let pn = libm::sqrt(param.iter().map(|v| v * v).sum());
    let rn = libm::sqrt(update.iter().map(|v| v * v).sum());
    if pn > 0.0 && rn > 0.0 {
        pn / rn
    } else {
        1.0
    }
}

/// Warmup + cosine learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

/// Learning rate at a step, flagged when the step was past the end.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduledLr {
    pub lr: f64,
    pub clamped: bool,
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            bail!(Config, "warmup_steps {} must be below total_steps {}", self.warmup_steps, self.total_steps);
        }
        if !(self.peak_lr >= 0.0) {
            bail!(Config, "peak_lr must be non-negative, got {}", self.peak_lr);
        }
        Ok(())
    }
}

/// Linear ramp `0 → peak` over the warmup, then `peak · ½(1 + cos(π·p))`
/// with `p` running from 0 at the end of warmup to 1 at `total_steps`.
/// Steps past the end yield 0 with `clamped` set.
pub fn cosine_lr(step: u64, spec: &ScheduleSpec) -> ScheduledLr {
    if step > spec.total_steps {
        return ScheduledLr { lr: 0.0, clamped: true };
    }
    let lr = if step < spec.warmup_steps {
        spec.peak_lr * step as f64 / spec.warmup_steps as f64
    } else if step == spec.total_steps {
        0.0
    } else {
        let span = (spec.total_steps - spec.warmup_steps) as f64;
        let progress = (step - spec.warmup_steps) as f64 / span;
        spec.peak_lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
    };
    ScheduledLr { lr, clamped: false }
}

/// `rate^(n_layers − layer_index)`.
pub fn layer_decay_scale(layer_index: usize, n_layers: usize, rate: f64) -> Result<f64> {
    if !(rate > 0.0 && rate <= 1.0) {
        bail!(Config, "layer decay rate must lie in (0, 1], got {rate}");
    }
    if layer_index > n_layers {
        bail!(Config, "layer index {layer_index} exceeds depth {n_layers}");
    }
    Ok(libm::pow(rate, (n_layers - layer_index) as f64))
}

/// Learning-rate settings for the two towers. Warmup belongs to the schedule
/// and is set on the first stage of each run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub vision_peak_lr: f64,
    pub text_peak_lr: f64,
    pub vision_layer_decay: f64,
    pub text_layer_decay: f64,
    pub hyper: LambHyper,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            vision_peak_lr: 4e-4,
            text_peak_lr: 4e-5,
            vision_layer_decay: 0.9,
            text_layer_decay: 0.75,
            hyper: LambHyper::default(),
        }
    }
}

/// Parameters sharing one depth position of one tower.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    /// e.g. `vision.block3`.
    pub label: String,
    /// Prefixed parameter names (`vision.` / `text.`).
    pub names: Vec<String>,
    pub layer_index: usize,
    /// Depth of the head group; the decay exponent is `n_layers − layer_index`.
    pub n_layers: usize,
    pub decay_rate: f64,
    pub base_peak_lr: f64,
}

impl ParamGroup {
    /// `base_peak_lr · rate^(n_layers − layer_index)`.
    pub fn peak_lr(&self) -> Result<f64> {
        Ok(self.base_peak_lr * layer_decay_scale(self.layer_index, self.n_layers, self.decay_rate)?)
    }
}

/// Depth position of a parameter: embeddings 0, block `k` (0-based) `k + 1`,
/// final norm and projection `layers + 1`.
pub fn layer_index_of(name: &str, layers: usize) -> Option<usize> {
    if let Some(rest) = name.strip_prefix("blocks.") {
        let k: usize = rest.split('.').next()?.parse().ok()?;
        return (k < layers).then_some(k + 1);
    }
    match name {
        "patch_embed.weight" | "patch_embed.bias" | "class_token" | "pos_embed" | "token_embed" => Some(0),
        "final_norm.weight" | "final_norm.bias" | "projection" => Some(layers + 1),
        _ => None,
    }
}

fn tower_groups(
    prefix: &str,
    weights: &TowerWeights,
    config: &TowerConfig,
    base_peak_lr: f64,
    decay_rate: f64,
) -> Result<Vec<ParamGroup>> {
    let depth = config.layers + 1;
    let mut groups: Vec<ParamGroup> = (0..=depth)
        .map(|i| ParamGroup {
            label: match i {
                0 => format!("{prefix}.embed"),
                i if i == depth => format!("{prefix}.head"),
                i => format!("{prefix}.block{}", i - 1),
            },
            names: Vec::new(),
            layer_index: i,
            n_layers: depth,
            decay_rate,
            base_peak_lr,
        })
        .collect();
    for name in weights.names() {
        let Some(i) = layer_index_of(name, config.layers) else {
            bail!(Contract, "parameter `{prefix}.{name}` belongs to no group");
        };
        groups[i].names.push(format!("{prefix}.{name}"));
    }
    Ok(groups)
}

/// Partitions both towers into per-depth groups: `layers + 2` groups per
/// tower, each parameter in exactly one.
pub fn build_param_groups(
    vision: &TowerWeights,
    vision_config: &TowerConfig,
    text: &TowerWeights,
    text_config: &TowerConfig,
    cfg: &OptimConfig,
) -> Result<Vec<ParamGroup>> {
    if !matches!(vision_config.input, TowerInput::Vision { .. }) || !matches!(text_config.input, TowerInput::Text { .. }) {
        bail!(Config, "param groups need a vision and a text tower");
    }
    let mut groups = tower_groups("vision", vision, vision_config, cfg.vision_peak_lr, cfg.vision_layer_decay)?;
    groups.extend(tower_groups("text", text, text_config, cfg.text_peak_lr, cfg.text_layer_decay)?);
    Ok(groups)
}

/// Groups for a single vision tower (distillation).
pub fn build_vision_groups(vision: &TowerWeights, config: &TowerConfig, peak_lr: f64, decay: f64) -> Result<Vec<ParamGroup>> {
    tower_groups("vision", vision, config, peak_lr, decay)
}

/// Maps every prefixed parameter name to its peak learning rate.
pub fn peak_lr_table(groups: &[ParamGroup]) -> Result<BTreeMap<String, f64>> {
    let mut table = BTreeMap::new();
    for g in groups {
        let lr = g.peak_lr()?;
        for n in &g.names {
            if table.insert(n.clone(), lr).is_some() {
                bail!(Contract, "parameter `{n}` appears in two groups");
            }
        }
    }
    Ok(table)
}
