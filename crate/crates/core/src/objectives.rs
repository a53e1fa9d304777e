//! Training losses: symmetric image-text contrastive loss and masked
//! feature distillation, plus patch-mask sampling.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Paired embeddings; row `i` of each side is a positive pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub image_embeddings: Tensor,
    pub text_embeddings: Tensor,
    pub temperature: f64,
}

/// How cosine similarities are scaled into logits.
#[derive(Debug, Clone, Copy)]
pub enum LogitScale {
    /// Divide by a fixed temperature τ.
    Fixed(f64),
    /// Multiply by `exp(v)` for a scalar tape variable `v` (learned `ln(1/τ)`).
    Learned(Var),
}

/// Loss and logits of a contrastive step on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveOutput {
    pub loss: Var,
    /// `[b, b]`, `logits[i, j] = î_i · t̂_j / τ`.
    pub logits: Var,
}

/// Symmetric InfoNCE over a batch of `[b, d]` image and text embeddings.
///
/// Embeddings are L2-normalised here; the loss is the mean of the image→text
/// and text→image cross-entropies with the diagonal as targets.
pub fn contrastive_loss_on_tape(tape: &mut Tape, images: Var, texts: Var, scale: LogitScale) -> Result<ContrastiveOutput> {
    let (si, st) = (tape.shape(images).to_vec(), tape.shape(texts).to_vec());
    if si.len() != 2 || si != st {
        bail!(Dimension, "contrastive embeddings must be equal [b, d], got {:?} and {:?}", si, st);
    }
    let b = si[0];
    if b == 0 {
        bail!(Contract, "contrastive batch is empty");
    }
    if !tape.value(images).is_finite() || !tape.value(texts).is_finite() {
        bail!(Numeric, "non-finite embedding in contrastive batch");
    }
    let img = tape.normalize(images)?;
    let txt = tape.normalize(texts)?;
    let cos = tape.matmul_nt(img, txt)?;
    let logits = match scale {
        LogitScale::Fixed(tau) => {
            if !(tau > 0.0) {
                bail!(Config, "temperature must be positive, got {tau}");
            }
            tape.scale(cos, 1.0 / tau)
        }
        LogitScale::Learned(log_scale) => {
            if tape.shape(log_scale).iter().product::<usize>() != 1 {
                bail!(Dimension, "learned logit scale must be a single value");
            }
            let log_scale = tape.reshape(log_scale, &[])?;
            let s = tape.exp(log_scale);
            tape.mul(cos, s)?
        }
    };
    let targets: Vec<usize> = (0..b).collect();
    let rows = tape.cross_entropy(logits, &targets)?;
    let transposed = tape.permute(logits, &[1, 0])?;
    let cols = tape.cross_entropy(transposed, &targets)?;
    let sum = tape.add(rows, cols)?;
    let loss = tape.scale(sum, 0.5);
    Ok(ContrastiveOutput { loss, logits })
}

/// Value-level contrastive loss, returning `(loss, logits)`.
pub fn contrastive_loss(batch: &ContrastiveBatch) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let i = tape.constant(batch.image_embeddings.clone());
    let t = tape.constant(batch.text_embeddings.clone());
    let out = contrastive_loss_on_tape(&mut tape, i, t, LogitScale::Fixed(batch.temperature))?;
    Ok((tape.value(out.loss).item()?, tape.value(out.logits).clone()))
}

/// Which patch positions are kept; the class token is not part of the mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMask {
    keep: Vec<bool>,
}

impl PatchMask {
    pub fn new(keep: Vec<bool>) -> Self {
        Self { keep }
    }

    pub fn all_kept(n_patches: usize) -> Self {
        Self { keep: alloc::vec![true; n_patches] }
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn dropped_count(&self) -> usize {
        self.keep.len() - self.kept_count()
    }

    /// Fraction of positions dropped.
    pub fn ratio(&self) -> f64 {
        if self.keep.is_empty() {
            0.0
        } else {
            self.dropped_count() as f64 / self.keep.len() as f64
        }
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        self.keep.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect()
    }

    pub fn dropped_indices(&self) -> Vec<usize> {
        self.keep.iter().enumerate().filter(|(_, &k)| !k).map(|(i, _)| i).collect()
    }

    /// Keep flags over the full vision sequence: class token (always kept)
    /// followed by the patches.
    pub fn sequence_keep(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.keep.len() + 1);
        out.push(true);
        out.extend_from_slice(&self.keep);
        out
    }
}

/// Number of positions a mask with this ratio drops.
pub fn dropped_for_ratio(n_patches: usize, ratio: f64) -> usize {
    libm::round(ratio * n_patches as f64) as usize
}

/// Drops exactly `round(ratio · n_patches)` positions chosen uniformly
/// without replacement.
pub fn sample_patch_mask_with<R: Rng + ?Sized>(n_patches: usize, ratio: f64, rng: &mut R) -> Result<PatchMask> {
    if !(0.0..1.0).contains(&ratio) {
        bail!(Config, "patch mask ratio must lie in [0, 1), got {ratio}");
    }
    let drop = dropped_for_ratio(n_patches, ratio);
    let mut keep = alloc::vec![true; n_patches];
    for i in rand::seq::index::sample(rng, n_patches, drop) {
        keep[i] = false;
    }
    Ok(PatchMask { keep })
}

/// Seeded form of [`sample_patch_mask_with`].
pub fn sample_patch_mask(n_patches: usize, ratio: f64, rng_seed: u64) -> Result<PatchMask> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    sample_patch_mask_with(n_patches, ratio, &mut rng)
}

/// Mean of `1 − cos(student, teacher)` over the masked (dropped) patch
/// positions of every sample.
///
/// `student` is a `[b, n, d]` tape variable, `teacher` a `[b, n, d]`
/// constant; the teacher never receives gradients. One mask per sample.
pub fn distillation_loss_on_tape(tape: &mut Tape, student: Var, teacher: &Tensor, masks: &[PatchMask]) -> Result<Var> {
    let ss = tape.shape(student).to_vec();
    if ss.len() != 3 || ss != teacher.shape() {
        bail!(Dimension, "student {:?} and teacher {:?} features must be equal [b, n, d]", ss, teacher.shape());
    }
    let (b, n, d) = (ss[0], ss[1], ss[2]);
    if masks.len() != b {
        bail!(Dimension, "{} masks for a batch of {}", masks.len(), b);
    }
    let mut positions = Vec::new();
    for (i, m) in masks.iter().enumerate() {
        if m.len() != n {
            bail!(Dimension, "mask {i} covers {} positions, features have {}", m.len(), n);
        }
        positions.extend(m.dropped_indices().into_iter().map(|j| i * n + j));
    }
    if positions.is_empty() {
        bail!(Contract, "distillation mask selects no positions");
    }
    let s = tape.reshape(student, &[b * n, d])?;
    let s = tape.index_rows(s, &positions)?;
    let s = tape.normalize(s)?;
    let t = teacher.clone().reshape(&[b * n, d])?.select_rows(&positions)?;
    let t = crate::tensor::normalize_rows(&t)?;
    let t = tape.constant(t);
    let prod = tape.mul(s, t)?;
    let cos = tape.sum_last(prod)?;
    let mean_cos = tape.mean(cos)?;
    Ok(tape.affine(mean_cos, -1.0, 1.0))
}

/// Value-level distillation loss.
pub fn distillation_loss(student: &Tensor, teacher: &Tensor, masks: &[PatchMask]) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(student.clone());
    let loss = distillation_loss_on_tape(&mut tape, s, teacher, masks)?;
    tape.value(loss).item()
}
