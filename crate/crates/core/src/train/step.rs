use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::plan::Objective;
use crate::error::{bail, Result};
use crate::model::{BoundTower, TowerWeights};
use crate::optim::{LambHyper, LambState, LambUpdate};
use crate::tensor::{Gradients, Tensor};

/// One optimiser step as logged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based step within the schedule.
    pub step: u64,
    pub loss: f64,
    /// Learning rate of the undecayed (head) vision group.
    pub lr: f64,
    /// Patch tokens the vision tower saw per image.
    pub visible_patches: usize,
    /// Mean of image-to-text and text-to-image top-1 within the batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_batch_accuracy: Option<f64>,
}

/// Every step of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub name: String,
    pub objective: Objective,
    pub steps: Vec<StepRecord>,
}

impl StageTrace {
    pub fn new(name: &str, objective: Objective) -> Self {
        Self { name: String::from(name), objective, steps: Vec::new() }
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }
}

/// Gradients of a bound tower keyed by `prefix.name`.
pub(crate) fn collect_grads(prefix: &str, bound: &BoundTower, grads: &Gradients, out: &mut BTreeMap<String, Tensor>) {
    for (name, var) in bound.iter() {
        out.insert(format!("{prefix}.{name}"), grads.get_or_zeros(var));
    }
}

/// One LAMB step over whole towers plus loose extra tensors, with learning
/// rates looked up by prefixed name.
pub(crate) fn lamb_towers(
    state: &mut LambState,
    hyper: &LambHyper,
    towers: &mut [(&str, &mut TowerWeights)],
    extras: &mut [(&str, &mut Tensor)],
    grads: &BTreeMap<String, Tensor>,
    lr: &dyn Fn(&str) -> f64,
) -> Result<()> {
    let keys: Vec<Vec<String>> = towers.iter().map(|(p, w)| w.names().map(|n| format!("{p}.{n}")).collect()).collect();
    let mut updates = Vec::new();
    for ((_, w), ks) in towers.iter_mut().zip(&keys) {
        for ((_, param), key) in w.iter_mut().zip(ks) {
            let Some(grad) = grads.get(key) else {
                bail!(Contract, "no gradient for `{key}`");
            };
            updates.push(LambUpdate { name: key, param, grad, lr: lr(key) });
        }
    }
    for (key, param) in extras.iter_mut() {
        let Some(grad) = grads.get(*key) else {
            bail!(Contract, "no gradient for `{key}`");
        };
        updates.push(LambUpdate { name: key, param, grad, lr: lr(key) });
    }
    state.step(hyper, &mut updates)
}

/// Mean of row-wise and column-wise diagonal top-1 of a square logit matrix.
pub fn in_batch_accuracy(logits: &Tensor) -> f64 {
    let b = logits.shape()[0];
    let x = logits.data();
    let argmax = |get: &dyn Fn(usize) -> f64| -> usize {
        (0..b).fold(0, |best, j| if get(j) > get(best) { j } else { best })
    };
    let rows = (0..b).filter(|&i| argmax(&|j| x[i * b + j]) == i).count();
    let cols = (0..b).filter(|&j| argmax(&|i| x[i * b + j]) == j).count();
    (rows + cols) as f64 / (2 * b) as f64
}
