use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::model::gather_visible_tokens;
use crate::objectives::PatchMask;
use crate::tensor::{Tape, Var};

/// Drops masked patch tokens. `patch_tokens` is `[b, n, d]` before
/// positional embeddings, `pos_embed` `[n + 1, d]` (class position first) and
/// `class_token` `[d]`. Kept tokens stay in order with their positions; the
/// class token is prepended. All masks must keep the same count.
pub fn apply_patch_dropout(tape: &mut Tape, patch_tokens: Var, pos_embed: Var, class_token: Var, masks: &[PatchMask]) -> Result<Var> {
    let s = tape.shape(patch_tokens);
    if s.len() != 3 {
        bail!(Dimension, "patch tokens must be [b, n, d], got {:?}", s);
    }
    let n = s[1];
    if let Some((i, m)) = masks.iter().enumerate().find(|(_, m)| m.len() != n) {
        bail!(Dimension, "mask {i} covers {} patches, tokens have {n}", m.len());
    }
    let kept: Vec<Vec<usize>> = masks.iter().map(PatchMask::kept_indices).collect();
    gather_visible_tokens(tape, patch_tokens, pos_embed, class_token, &kept)
}
