use super::{Tape, Tensor, Var};
use crate::error::{bail, Result};

impl Tape {
    /// Scaled dot-product attention over `[b, h, n, dh]` operands:
    /// `softmax(q·kᵀ/√dh + mask)·v`.
    ///
    /// `mask` is an additive `[n, n]` (or broadcastable suffix) tensor; use
    /// `-inf` to block a key.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Option<&Tensor>) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 4 || sq != sk || sq != sv {
            bail!(Dimension, "attention expects equal [b,h,n,dh] shapes, got {:?}, {:?}, {:?}", sq, sk, sv);
        }
        let dh = sq[3];
        if dh == 0 {
            bail!(Dimension, "attention head dimension is zero");
        }
        let scores = self.matmul_nt(q, k)?;
        let mut scores = self.scale(scores, 1.0 / libm::sqrt(dh as f64));
        if let Some(mask) = mask {
            let m = self.constant(mask.clone());
            scores = self.add(scores, m)?;
        }
        let weights = self.softmax(scores)?;
        self.matmul(weights, v)
    }
}

/// Additive causal mask: position `i` may attend to keys `0..=i`.
pub fn causal_mask(n: usize) -> Tensor {
    let mut mask = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            mask.data_mut()[i * n + j] = f64::NEG_INFINITY;
        }
    }
    mask
}
