//! Central finite-difference oracle for tape gradients.
//!
//! The oracle only ever evaluates the forward function, so it stays
//! independent of every backward rule it checks.

use alloc::vec::Vec;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of a gradient check over several inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Per input: `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
    pub relative_errors: Vec<f64>,
    /// Per input: `max(‖analytic‖₂, ‖numeric‖₂)`. Inputs whose true gradient
    /// vanishes (such as a key bias under softmax) only show noise here.
    pub scales: Vec<f64>,
}

impl GradCheck {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }

    /// Inputs failing `relative < tol`, ignoring those whose gradient scale
    /// is below `zero_scale` (both sides agree the gradient is zero).
    pub fn failures(&self, tol: f64, zero_scale: f64) -> Vec<usize> {
        (0..self.relative_errors.len())
            .filter(|&i| self.scales[i] >= zero_scale && !(self.relative_errors[i] < tol))
            .collect()
    }
}

/// Compares tape gradients of the scalar `f(inputs)` against central
/// differences with the given step.
///
/// `f` receives a fresh tape and one differentiable leaf per input.
pub fn check_gradients<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let root = f(&mut tape, &vars)?;
        tape.value(root).item()
    };

    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut scales = Vec::with_capacity(inputs.len());
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(v);
        let mut numeric = Vec::with_capacity(inputs[i].numel());
        let mut probe: Vec<Tensor> = inputs.to_vec();
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + step;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - step;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * step));
        }
        let diff: f64 = analytic.data().iter().zip(&numeric).map(|(a, n)| (a - n) * (a - n)).sum();
        let na = analytic.l2_norm();
        let nn = libm::sqrt(numeric.iter().map(|v| v * v).sum());
        let denom = na.max(nn);
        scales.push(denom);
        relative_errors.push(if denom == 0.0 { 0.0 } else { libm::sqrt(diff) / denom });
    }
    Ok(GradCheck { relative_errors, scales })
}
