use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::config::{NormKind, TowerConfig, TowerInput};
use super::weights::{BoundTower, TowerWeights};
use crate::error::{bail, Result};
use crate::tensor::{causal_mask, Tape, Tensor, Var};

/// Splits `[b, c, H, W]` images into `[b, n, c·p·p]` patch vectors, patches in
/// row-major grid order and each vector ordered channel, row, column.
pub fn patchify(images: &Tensor, patch_size: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 {
        bail!(Dimension, "images must be [b, c, H, W], got {:?}", s);
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        bail!(Dimension, "image {h}x{w} is not divisible into {patch_size}px patches");
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let pd = c * patch_size * patch_size;
    let src = images.data();
    let mut out = Vec::with_capacity(b * gh * gw * pd);
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for ch in 0..c {
                    for y in 0..patch_size {
                        let row = ((bi * c + ch) * h + py * patch_size + y) * w + px * patch_size;
                        out.extend_from_slice(&src[row..row + patch_size]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, gh * gw, pd], out)
}

fn norm(tape: &mut Tape, bound: &BoundTower, config: &TowerConfig, x: Var, prefix: &str) -> Result<Var> {
    let gamma = bound.var(&format!("{prefix}.weight"))?;
    match config.norm_kind {
        NormKind::Rms => tape.rms_norm(x, gamma, config.norm_eps),
        NormKind::Layer => {
            let beta = bound.var(&format!("{prefix}.bias"))?;
            tape.layer_norm(x, gamma, beta, config.norm_eps)
        }
    }
}

fn linear(tape: &mut Tape, bound: &BoundTower, x: Var, prefix: &str) -> Result<Var> {
    let y = tape.matmul(x, bound.var(&format!("{prefix}.weight"))?)?;
    match bound.try_var(&format!("{prefix}.bias")) {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

/// Pre-norm transformer block on `[b, n, d]`.
fn block(
    tape: &mut Tape,
    bound: &BoundTower,
    config: &TowerConfig,
    x: Var,
    index: usize,
    mask: Option<&Tensor>,
) -> Result<Var> {
    let p = format!("blocks.{index}");
    let shape = tape.shape(x).to_vec();
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    let (heads, dh) = (config.heads, config.head_dim());

    let h = norm(tape, bound, config, x, &format!("{p}.norm1"))?;
    let split = |tape: &mut Tape, name: &str| -> Result<Var> {
        let y = linear(tape, bound, h, &format!("{p}.attn.{name}"))?;
        let y = tape.reshape(y, &[b, n, heads, dh])?;
        tape.permute(y, &[0, 2, 1, 3])
    };
    let q = split(tape, "q")?;
    let k = split(tape, "k")?;
    let v = split(tape, "v")?;
    let a = tape.attention(q, k, v, mask)?;
    let a = tape.permute(a, &[0, 2, 1, 3])?;
    let a = tape.reshape(a, &[b, n, d])?;
    let a = linear(tape, bound, a, &format!("{p}.attn.out"))?;
    let x = tape.add(x, a)?;

    let h = norm(tape, bound, config, x, &format!("{p}.norm2"))?;
    let h = linear(tape, bound, h, &format!("{p}.mlp.fc1"))?;
    let h = tape.gelu(h);
    let h = linear(tape, bound, h, &format!("{p}.mlp.fc2"))?;
    tape.add(x, h)
}

/// Output of the vision tower.
#[derive(Debug, Clone, Copy)]
pub struct VisionOutput {
    /// Final-normed token features `[b, m + 1, width]`, class token first.
    pub tokens: Var,
    /// Projected class-token embedding `[b, projection_dim]`, unnormalised.
    pub embedding: Var,
}

/// Runs the vision tower.
///
/// `keep`, when given, holds one flag per sequence position (class token
/// first, then patches in grid order) for every image. Every image must keep
/// the same number of positions and the class token must be kept.
pub fn vision_forward(
    tape: &mut Tape,
    bound: &BoundTower,
    config: &TowerConfig,
    images: &Tensor,
    keep: Option<&[Vec<bool>]>,
) -> Result<VisionOutput> {
    let TowerInput::Vision { patch_size, input_resolution, channels } = config.input else {
        bail!(Config, "vision_forward needs a vision tower config");
    };
    let s = images.shape();
    if s.len() != 4 || s[1] != channels || s[2] != input_resolution || s[3] != input_resolution {
        bail!(
            Dimension,
            "images {:?} do not match [b, {channels}, {input_resolution}, {input_resolution}]",
            s
        );
    }
    let b = s[0];
    let n = config.num_patches().unwrap_or(0);
    let d = config.width;

    // kept patch indices per image (grid order), validated against the mask
    let kept: Vec<Vec<usize>> = match keep {
        None => vec![(0..n).collect(); b],
        Some(flags) => {
            if flags.len() != b {
                bail!(Dimension, "{} keep masks for {} images", flags.len(), b);
            }
            let mut kept = Vec::with_capacity(b);
            for (i, f) in flags.iter().enumerate() {
                if f.len() != n + 1 {
                    bail!(Dimension, "keep mask {i} has {} entries, expected {}", f.len(), n + 1);
                }
                if !f[0] {
                    bail!(Contract, "keep mask {i} drops the class token");
                }
                kept.push(f[1..].iter().enumerate().filter(|(_, &k)| k).map(|(j, _)| j).collect::<Vec<_>>());
            }
            if kept.iter().any(|k| k.len() != kept[0].len()) {
                bail!(Dimension, "keep masks retain different numbers of patches");
            }
            kept
        }
    };
    let m = kept.first().map_or(n, Vec::len);

    let patches = tape.constant(patchify(images, patch_size)?);
    let x = linear(tape, bound, patches, "patch_embed")?;
    let mut x = gather_visible_tokens(tape, x, bound.var("pos_embed")?, bound.var("class_token")?, &kept)?;

    for i in 0..config.layers {
        x = block(tape, bound, config, x, i, None)?;
    }
    let tokens = norm(tape, bound, config, x, "final_norm")?;
    let flat = tape.reshape(tokens, &[b * (m + 1), d])?;
    let cls_rows = tape.index_rows(flat, &(0..b).map(|i| i * (m + 1)).collect::<Vec<_>>())?;
    let embedding = tape.matmul(cls_rows, bound.var("projection")?)?;
    Ok(VisionOutput { tokens, embedding })
}

/// Adds positional embeddings to `[b, n, d]` patch tokens, keeps the listed
/// patches of each image in their original order and prepends the class
/// token (plus its position). Returns `[b, m + 1, d]`.
pub fn gather_visible_tokens(tape: &mut Tape, patch_tokens: Var, pos_embed: Var, class_token: Var, kept: &[Vec<usize>]) -> Result<Var> {
    let s = tape.shape(patch_tokens).to_vec();
    if s.len() != 3 {
        bail!(Dimension, "patch tokens must be [b, n, d], got {:?}", s);
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    if tape.shape(pos_embed) != [n + 1, d] || tape.shape(class_token) != [d] {
        bail!(Dimension, "positional {:?} / class token {:?} do not fit {n} patches of width {d}", tape.shape(pos_embed), tape.shape(class_token));
    }
    if kept.len() != b {
        bail!(Dimension, "{} keep lists for {b} images", kept.len());
    }
    let m = kept.first().map_or(0, Vec::len);
    if kept.iter().any(|k| k.len() != m) {
        bail!(Dimension, "keep masks retain different numbers of patches");
    }
    if let Some(&bad) = kept.iter().flatten().find(|&&j| j >= n) {
        bail!(Dimension, "patch index {bad} out of {n}");
    }
    let patch_pos = tape.index_rows(pos_embed, &(1..=n).collect::<Vec<_>>())?;
    let x = tape.add(patch_tokens, patch_pos)?;
    let x = tape.reshape(x, &[b * n, d])?;

    let cls_pos = tape.index_rows(pos_embed, &[0])?;
    let cls_pos = tape.reshape(cls_pos, &[d])?;
    let cls = tape.add(class_token, cls_pos)?;
    let cls = tape.reshape(cls, &[1, d])?;

    // gather [cls, kept patches...] per image from the stacked rows
    let pool = tape.concat(&[x, cls])?;
    let mut order = Vec::with_capacity(b * (m + 1));
    for (bi, k) in kept.iter().enumerate() {
        order.push(b * n);
        order.extend(k.iter().map(|&j| bi * n + j));
    }
    let x = tape.index_rows(pool, &order)?;
    tape.reshape(x, &[b, m + 1, d])
}

/// Position of the first end-of-text token in every row.
pub fn end_positions(config: &TowerConfig, tokens: &[Vec<usize>]) -> Result<Vec<usize>> {
    let TowerInput::Text { vocab_size, context_length, end_token } = config.input else {
        bail!(Config, "text input needs a text tower config");
    };
    let mut ends = Vec::with_capacity(tokens.len());
    for (r, row) in tokens.iter().enumerate() {
        if row.len() != context_length {
            bail!(Dimension, "token row {r} has length {}, expected {context_length}", row.len());
        }
        if let Some(&bad) = row.iter().find(|&&t| t >= vocab_size) {
            bail!(Input, "token id {bad} in row {r} exceeds vocabulary of {vocab_size}");
        }
        match row.iter().position(|&t| t == end_token) {
            Some(p) => ends.push(p),
            None => bail!(Contract, "token row {r} has no end-of-text token ({end_token})"),
        }
    }
    Ok(ends)
}

/// Runs the text tower under a causal mask and returns the projected
/// end-of-text features `[b, projection_dim]`, unnormalised.
pub fn text_forward(tape: &mut Tape, bound: &BoundTower, config: &TowerConfig, tokens: &[Vec<usize>]) -> Result<Var> {
    let ends = end_positions(config, tokens)?;
    let b = tokens.len();
    if b == 0 {
        bail!(Dimension, "empty token batch");
    }
    let n = config.sequence_length();
    let d = config.width;
    let ids: Vec<usize> = tokens.iter().flatten().copied().collect();
    let x = tape.index_rows(bound.var("token_embed")?, &ids)?;
    let x = tape.reshape(x, &[b, n, d])?;
    let mut x = tape.add(x, bound.var("pos_embed")?)?;
    let mask = causal_mask(n);
    for i in 0..config.layers {
        x = block(tape, bound, config, x, i, Some(&mask))?;
    }
    let x = norm(tape, bound, config, x, "final_norm")?;
    let flat = tape.reshape(x, &[b * n, d])?;
    let rows: Vec<usize> = ends.iter().enumerate().map(|(i, &e)| i * n + e).collect();
    let pooled = tape.index_rows(flat, &rows)?;
    tape.matmul(pooled, bound.var("projection")?)
}

/// Projected class-token embeddings of `[b, c, H, W]` images, no gradients.
pub fn encode_image(weights: &TowerWeights, config: &TowerConfig, images: &Tensor, keep: Option<&[Vec<bool>]>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = weights.bind(&mut tape, false);
    let out = vision_forward(&mut tape, &bound, config, images, keep)?;
    Ok(tape.value(out.embedding).clone())
}

/// Projected end-of-text embeddings of token rows, no gradients.
pub fn encode_text(weights: &TowerWeights, config: &TowerConfig, tokens: &[Vec<usize>]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = weights.bind(&mut tape, false);
    let out = text_forward(&mut tape, &bound, config, tokens)?;
    Ok(tape.value(out).clone())
}

/// Final-normed token features `[b, n + 1, width]` of the full (unmasked)
/// images, no gradients.
pub fn image_token_features(weights: &TowerWeights, config: &TowerConfig, images: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = weights.bind(&mut tape, false);
    let out = vision_forward(&mut tape, &bound, config, images, None)?;
    Ok(tape.value(out.tokens).clone())
}
