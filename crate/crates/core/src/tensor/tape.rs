use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{dot, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::Tensor;
use crate::error::{bail, Result};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    MatMul { a: Var, b: Var, trans_b: bool },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Gelu(Var),
    Exp(Var),
    Softmax(Var),
    RmsNorm { x: Var, gamma: Var, inv_rms: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    NormalizeRows { x: Var, norms: Vec<f64> },
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    IndexRows { src: Var, indices: Vec<usize> },
    Concat(Vec<Var>),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations. Node inputs always precede the node, so
/// creation order is a valid topological order.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    macs: u64,
}

/// Gradients of a scalar root with respect to every differentiable leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    by_node: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `leaf`, `None` if it does not require gradients or the
    /// root does not depend on it.
    pub fn get(&self, leaf: Var) -> Option<Tensor> {
        let data = self.by_node.get(leaf.0)?.as_ref()?;
        Some(Tensor { shape: self.shapes[leaf.0].clone(), data: data.clone() })
    }

    /// Gradient of `leaf`, zeros when the root does not depend on it.
    pub fn get_or_zeros(&self, leaf: Var) -> Tensor {
        self.get(leaf).unwrap_or_else(|| Tensor::zeros(&self.shapes[leaf.0]))
    }
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations executed by matrix products so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if !is_suffix(&bv.shape, &av.shape) {
            bail!(Dimension, "{name}: shape {:?} does not broadcast onto {:?}", bv.shape, av.shape);
        }
        let period = bv.data.len().max(1);
        let data = av
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data[i % period]))
            .collect();
        Ok(Tensor { shape: av.shape.clone(), data })
    }

    /// `a + b`, with `b` broadcast over the leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// `a - b`, with `b` broadcast over the leading dimensions of `a`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise `a * b`, with `b` broadcast over the leading dimensions of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data.iter().map(|v| scale * v + shift).collect();
        let value = Tensor { shape: xv.shape.clone(), data };
        let rg = self.rg(x);
        self.push(value, Op::Affine { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// Batched matrix product over the last two axes.
    ///
    /// `a` is `[.., m, k]`. `b` is either `[k, n]` (shared across the batch)
    /// or `[.., k, n]` with the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Like [`Tape::matmul`] with `b` transposed in its last two axes:
    /// `b` is `[n, k]` or `[.., n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_dims(&self, a: Var, b: Var, trans_b: bool) -> Result<(usize, usize, usize, usize, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() < 2 {
            bail!(Dimension, "matmul needs rank >= 2 operands, got {:?} and {:?}", sa, sb);
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            bail!(Dimension, "matmul inner dimensions differ: {:?} x {:?}", sa, sb);
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let shared_b = sb.len() == 2;
        if !shared_b && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            bail!(Dimension, "matmul batch dimensions differ: {:?} x {:?}", sa, sb);
        }
        Ok((batch, m, k, n, shared_b))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (batch, m, k, n, shared_b) = self.matmul_dims(a, b, trans_b)?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; batch * m * n];
        if shared_b {
            let rows = batch * m;
            if trans_b {
                matmul_nt_acc(&av.data, &bv.data, &mut out, rows, k, n);
            } else {
                matmul_acc(&av.data, &bv.data, &mut out, rows, k, n);
            }
        } else {
            for t in 0..batch {
                let a_blk = &av.data[t * m * k..(t + 1) * m * k];
                let b_blk = &bv.data[t * k * n..(t + 1) * k * n];
                let o_blk = &mut out[t * m * n..(t + 1) * m * n];
                if trans_b {
                    matmul_nt_acc(a_blk, b_blk, o_blk, m, k, n);
                } else {
                    matmul_acc(a_blk, b_blk, o_blk, m, k, n);
                }
            }
        }
        let mut shape = av.shape[..av.shape.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        self.macs += (batch * m * k * n) as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let rank = xv.shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || core::mem::replace(&mut seen[a], true)) {
            bail!(Dimension, "invalid permutation {:?} for rank {}", axes, rank);
        }
        let value = permute_tensor(xv, axes);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Permute { x, axes: axes.to_vec() }, rg))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data.iter().map(|&v| 0.5 * v * (1.0 + libm::erf(v * core::f64::consts::FRAC_1_SQRT_2))).collect();
        let value = Tensor { shape: xv.shape.clone(), data };
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data.iter().map(|&v| libm::exp(v)).collect();
        let value = Tensor { shape: xv.shape.clone(), data };
        let rg = self.rg(x);
        self.push(value, Op::Exp(x), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let Some(&d) = xv.shape.last() else {
            bail!(Dimension, "softmax on a scalar");
        };
        if d == 0 {
            bail!(Dimension, "softmax over an empty axis");
        }
        let mut data = xv.data.clone();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        let value = Tensor { shape: xv.shape.clone(), data };
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// `gamma * x / sqrt(mean(x²) + eps)` over the last axis.
    pub fn rms_norm(&mut self, x: Var, gamma: Var, eps: f64) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gamma));
        let Some(&d) = xv.shape.last() else {
            bail!(Dimension, "rms_norm on a scalar");
        };
        if gv.shape != [d] {
            bail!(Dimension, "rms_norm gamma {:?} does not match last dim {d}", gv.shape);
        }
        if !(eps >= 0.0) {
            bail!(Config, "rms_norm eps must be non-negative, got {eps}");
        }
        let mut data = vec![0.0; xv.data.len()];
        let mut inv_rms = Vec::with_capacity(xv.data.len() / d.max(1));
        for (row, out) in xv.data.chunks(d).zip(data.chunks_mut(d)) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / libm::sqrt(ms + eps);
            for ((o, &v), &g) in out.iter_mut().zip(row).zip(&gv.data) {
                *o = g * v * inv;
            }
            inv_rms.push(inv);
        }
        let value = Tensor { shape: xv.shape.clone(), data };
        let rg = self.rg(x) || self.rg(gamma);
        Ok(self.push(value, Op::RmsNorm { x, gamma, inv_rms }, rg))
    }

    /// Mean/variance normalisation over the last axis followed by `gamma * . + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let Some(&d) = xv.shape.last() else {
            bail!(Dimension, "layer_norm on a scalar");
        };
        if gv.shape != [d] || bv.shape != [d] {
            bail!(Dimension, "layer_norm affine {:?}/{:?} does not match last dim {d}", gv.shape, bv.shape);
        }
        if !(eps >= 0.0) {
            bail!(Config, "layer_norm eps must be non-negative, got {eps}");
        }
        let mut data = vec![0.0; xv.data.len()];
        let mut xhat = vec![0.0; xv.data.len()];
        let mut rstd = Vec::with_capacity(xv.data.len() / d.max(1));
        for ((row, out), xh) in xv.data.chunks(d).zip(data.chunks_mut(d)).zip(xhat.chunks_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / libm::sqrt(var + eps);
            for i in 0..d {
                // a zero-variance row with eps = 0 gives 0 * inf; treat the centred value as exact 0
                let centred = row[i] - mean;
                xh[i] = if centred == 0.0 { 0.0 } else { centred * r };
                out[i] = gv.data[i] * xh[i] + bv.data[i];
            }
            rstd.push(r);
        }
        let value = Tensor { shape: xv.shape.clone(), data };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// Divides every vector along the last axis by its L2 norm.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let Some(&d) = xv.shape.last() else {
            bail!(Dimension, "normalize on a scalar");
        };
        let mut data = xv.data.clone();
        let mut norms = Vec::with_capacity(data.len() / d.max(1));
        for (r, row) in data.chunks_mut(d).enumerate() {
            let norm = libm::sqrt(row.iter().map(|v| v * v).sum());
            if !(norm > 0.0) || !norm.is_finite() {
                bail!(Numeric, "vector {r} has norm {norm}; cannot normalise");
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let value = Tensor { shape: xv.shape.clone(), data };
        let rg = self.rg(x);
        Ok(self.push(value, Op::NormalizeRows { x, norms }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.data.is_empty() {
            bail!(Dimension, "mean of an empty tensor");
        }
        let s = xv.data.iter().sum::<f64>() / xv.data.len() as f64;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::MeanAll(x), rg))
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let Some(&d) = xv.shape.last() else {
            bail!(Dimension, "sum_last on a scalar");
        };
        let data = if d == 0 {
            vec![0.0; 0]
        } else {
            xv.data.chunks(d).map(|r| r.iter().sum()).collect()
        };
        let shape = xv.shape[..xv.shape.len() - 1].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::SumLast(x), rg))
    }

    /// Gathers entries of the first axis. Output shape is
    /// `[indices.len(), src.shape[1..]]`.
    pub fn index_rows(&mut self, src: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(src).select_rows(indices)?;
        let rg = self.rg(src);
        Ok(self.push(value, Op::IndexRows { src, indices: indices.to_vec() }, rg))
    }

    /// Concatenates along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Dimension, "concat of zero tensors");
        };
        let tail = self.shape(first).get(1..).map(|s| s.to_vec());
        let Some(tail) = tail else {
            bail!(Dimension, "concat of scalars");
        };
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.shape.is_empty() || pv.shape[1..] != tail[..] {
                bail!(Dimension, "concat shape mismatch {:?} vs [_, {:?}]", pv.shape, tail);
            }
            rows += pv.shape[0];
            data.extend_from_slice(&pv.data);
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor { shape, data }, Op::Concat(parts.to_vec()), rg))
    }

    /// Mean softmax cross-entropy of `[b, c]` logits against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape.len() != 2 {
            bail!(Dimension, "cross_entropy expects [b, c] logits, got {:?}", lv.shape);
        }
        let (b, c) = (lv.shape[0], lv.shape[1]);
        if targets.len() != b || b == 0 {
            bail!(Dimension, "cross_entropy: {} targets for {} rows", targets.len(), b);
        }
        let mut probs = lv.data.clone();
        let mut loss = 0.0;
        for (row, (r, &t)) in probs.chunks_mut(c).zip(lv.data.chunks(c).zip(targets)) {
            if t >= c {
                bail!(Dimension, "target {t} out of range for {c} classes");
            }
            let lse = log_sum_exp(r);
            loss += lse - r[t];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(loss / b as f64);
        let rg = self.rg(logits);
        Ok(self.push(value, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, rg))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            bail!(Contract, "root {:?} is not on this tape", root);
        }
        if self.nodes[root.0].value.numel() != 1 {
            bail!(Contract, "backward root must be scalar, got shape {:?}", self.nodes[root.0].value.shape);
        }
        self.backward_with(root, &[1.0])
    }

    /// Reverse pass from `root` seeded with an explicit upstream gradient.
    pub fn backward_with(&self, root: Var, seed: &[f64]) -> Result<Gradients> {
        let n = self.nodes.len();
        if root.0 >= n {
            bail!(Contract, "root {:?} is not on this tape", root);
        }
        if seed.len() != self.nodes[root.0].value.numel() {
            bail!(Dimension, "seed of length {} for root of {} elements", seed.len(), self.nodes[root.0].value.numel());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(seed.to_vec());
        }
        let mut kept: Vec<Option<Vec<f64>>> = vec![None; n];
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                kept[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients { by_node: kept, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.data.len()]);
        f(buf);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.accumulate(grads, *b, |gb| {
                    let p = gb.len().max(1);
                    for (i, y) in g.iter().enumerate() {
                        gb[i % p] += sign * y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                let p = bv.len().max(1);
                self.accumulate(grads, *a, |ga| {
                    for (i, y) in g.iter().enumerate() {
                        ga[i] += y * bv[i % p];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (i, y) in g.iter().enumerate() {
                        gb[i % p] += y * av[i];
                    }
                });
            }
            Op::Affine { x, scale } => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(x, y)| *x += scale * y));
            }
            Op::MatMul { a, b, trans_b } => {
                let (batch, m, k, n, shared_b) =
                    self.matmul_dims(*a, *b, *trans_b).expect("dims validated in forward");
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                if shared_b {
                    let rows = batch * m;
                    self.accumulate(grads, *a, |ga| {
                        if *trans_b {
                            matmul_acc(g, bv, ga, rows, n, k);
                        } else {
                            matmul_nt_acc(g, bv, ga, rows, n, k);
                        }
                    });
                    self.accumulate(grads, *b, |gb| {
                        if *trans_b {
                            matmul_tn_acc(g, av, gb, n, rows, k);
                        } else {
                            matmul_tn_acc(av, g, gb, k, rows, n);
                        }
                    });
                } else {
                    self.accumulate(grads, *a, |ga| {
                        for t in 0..batch {
                            let gb = &g[t * m * n..(t + 1) * m * n];
                            let bb = &bv[t * k * n..(t + 1) * k * n];
                            let out = &mut ga[t * m * k..(t + 1) * m * k];
                            if *trans_b {
                                matmul_acc(gb, bb, out, m, n, k);
                            } else {
                                matmul_nt_acc(gb, bb, out, m, n, k);
                            }
                        }
                    });
                    self.accumulate(grads, *b, |gbuf| {
                        for t in 0..batch {
                            let gg = &g[t * m * n..(t + 1) * m * n];
                            let ab = &av[t * m * k..(t + 1) * m * k];
                            let out = &mut gbuf[t * k * n..(t + 1) * k * n];
                            if *trans_b {
                                matmul_tn_acc(gg, ab, out, n, m, k);
                            } else {
                                matmul_tn_acc(ab, gg, out, k, m, n);
                            }
                        }
                    });
                }
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let gt = Tensor { shape: node.value.shape.clone(), data: g.to_vec() };
                let back = permute_tensor(&gt, &inverse);
                self.accumulate(grads, *x, |gx| gx.iter_mut().zip(&back.data).for_each(|(x, y)| *x += y));
            }
            Op::Gelu(x) => {
                let xv = &self.value(*x).data;
                self.accumulate(grads, *x, |gx| {
                    for ((o, &v), y) in gx.iter_mut().zip(xv).zip(g) {
                        let cdf = 0.5 * (1.0 + libm::erf(v * core::f64::consts::FRAC_1_SQRT_2));
                        let pdf = libm::exp(-0.5 * v * v) / libm::sqrt(2.0 * core::f64::consts::PI);
                        *o += y * (cdf + v * pdf);
                    }
                });
            }
            Op::Exp(x) => {
                let yv = &node.value.data;
                self.accumulate(grads, *x, |gx| {
                    for ((o, y), gy) in gx.iter_mut().zip(yv).zip(g) {
                        *o += y * gy;
                    }
                });
            }
            Op::Softmax(x) => {
                let d = *node.value.shape.last().expect("softmax rank >= 1");
                let yv = &node.value.data;
                self.accumulate(grads, *x, |gx| {
                    for ((out, y), gy) in gx.chunks_mut(d).zip(yv.chunks(d)).zip(g.chunks(d)) {
                        let s = dot(y, gy);
                        for i in 0..d {
                            out[i] += y[i] * (gy[i] - s);
                        }
                    }
                });
            }
            Op::RmsNorm { x, gamma, inv_rms } => {
                let xv = &self.value(*x).data;
                let gv = &self.value(*gamma).data;
                let d = gv.len();
                self.accumulate(grads, *x, |gx| {
                    for (r, ((out, row), gy)) in gx.chunks_mut(d).zip(xv.chunks(d)).zip(g.chunks(d)).enumerate() {
                        let inv = inv_rms[r];
                        let mut s = 0.0;
                        for i in 0..d {
                            s += gv[i] * gy[i] * row[i];
                        }
                        let c = inv * inv * inv * s / d as f64;
                        for i in 0..d {
                            out[i] += inv * gv[i] * gy[i] - c * row[i];
                        }
                    }
                });
                self.accumulate(grads, *gamma, |gg| {
                    for (r, (row, gy)) in xv.chunks(d).zip(g.chunks(d)).enumerate() {
                        for i in 0..d {
                            gg[i] += gy[i] * row[i] * inv_rms[r];
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = &self.value(*gamma).data;
                let d = gv.len();
                self.accumulate(grads, *x, |gx| {
                    for (r, ((out, xh), gy)) in gx.chunks_mut(d).zip(xhat.chunks(d)).zip(g.chunks(d)).enumerate() {
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for i in 0..d {
                            let dxh = gy[i] * gv[i];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[i];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for i in 0..d {
                            let dxh = gy[i] * gv[i];
                            out[i] += rstd[r] * (dxh - mean_dxh - xh[i] * mean_dxh_xh);
                        }
                    }
                });
                self.accumulate(grads, *gamma, |gg| {
                    for (xh, gy) in xhat.chunks(d).zip(g.chunks(d)) {
                        for i in 0..d {
                            gg[i] += gy[i] * xh[i];
                        }
                    }
                });
                self.accumulate(grads, *beta, |gb| {
                    for gy in g.chunks(d) {
                        for i in 0..d {
                            gb[i] += gy[i];
                        }
                    }
                });
            }
            Op::NormalizeRows { x, norms } => {
                let d = *node.value.shape.last().expect("normalize rank >= 1");
                let yv = &node.value.data;
                self.accumulate(grads, *x, |gx| {
                    for (r, ((out, y), gy)) in gx.chunks_mut(d).zip(yv.chunks(d)).zip(g.chunks(d)).enumerate() {
                        let s = dot(y, gy);
                        for i in 0..d {
                            out[i] += (gy[i] - y[i] * s) / norms[r];
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let s = g[0];
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|v| *v += s));
            }
            Op::MeanAll(x) => {
                let len = self.value(*x).data.len() as f64;
                let s = g[0] / len;
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|v| *v += s));
            }
            Op::SumLast(x) => {
                let d = *self.shape(*x).last().expect("sum_last rank >= 1");
                self.accumulate(grads, *x, |gx| {
                    for (out, &y) in gx.chunks_mut(d.max(1)).zip(g) {
                        out.iter_mut().for_each(|v| *v += y);
                    }
                });
            }
            Op::IndexRows { src, indices } => {
                let row_len = self.value(*src).row_len();
                self.accumulate(grads, *src, |gs| {
                    for (j, &i) in indices.iter().enumerate() {
                        let dst = &mut gs[i * row_len..(i + 1) * row_len];
                        for (o, y) in dst.iter_mut().zip(&g[j * row_len..(j + 1) * row_len]) {
                            *o += y;
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).data.len();
                    let slice = &g[offset..offset + len];
                    self.accumulate(grads, p, |gp| gp.iter_mut().zip(slice).for_each(|(x, y)| *x += y));
                    offset += len;
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.shape(*logits)[1];
                let b = targets.len() as f64;
                let s = g[0] / b;
                self.accumulate(grads, *logits, |gl| {
                    for (r, (out, p)) in gl.chunks_mut(c).zip(probs.chunks(c)).enumerate() {
                        for j in 0..c {
                            let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                            out[j] += s * (p[j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

/// Numerically stable `log(sum(exp(row)))`.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum())
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn permute_tensor(x: &Tensor, axes: &[usize]) -> Tensor {
    let rank = x.shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * x.shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel = x.data.len();
    let mut data = Vec::with_capacity(numel);
    if numel == 0 {
        return Tensor { shape: out_shape, data };
    }
    if rank == 0 {
        data.push(x.data[0]);
        return Tensor { shape: out_shape, data };
    }
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    loop {
        for j in 0..out_shape[last] {
            data.push(x.data[offset + j * strides[last]]);
        }
        // advance the multi-index over all but the innermost axis
        let mut axis = last;
        loop {
            if axis == 0 {
                return Tensor { shape: out_shape, data };
            }
            axis -= 1;
            idx[axis] += 1;
            offset += strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            offset -= strides[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
}
