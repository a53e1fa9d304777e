use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Disjoint train and test row indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    /// Test top-1 as a fraction.
    pub accuracy: f64,
    /// Final regularised training loss.
    pub train_loss: f64,
    pub iterations: usize,
}

/// Multinomial logistic regression on frozen features.
///
/// Features are standardised with training statistics. Plain full-batch
/// gradient descent then runs for `max_iters` steps with step size
/// `1 / (½(d + 1) + λ)`, a bound on the loss curvature for standardised
/// inputs. Predictions break ties towards the lower class index.
pub fn linear_probe(features: &Tensor, labels: &[usize], split: &ProbeSplit, l2_penalty: f64, max_iters: usize) -> Result<ProbeResult> {
    if features.rank() != 2 || features.shape()[0] != labels.len() {
        bail!(Dimension, "features {:?} for {} labels", features.shape(), labels.len());
    }
    if !(l2_penalty >= 0.0) {
        bail!(Config, "l2 penalty must be non-negative, got {l2_penalty}");
    }
    let (n, d) = (features.shape()[0], features.shape()[1]);
    if split.train.is_empty() || split.test.is_empty() {
        bail!(Input, "probe split needs train and test rows");
    }
    if let Some(&bad) = split.train.iter().chain(&split.test).find(|&&i| i >= n) {
        bail!(Input, "split refers to row {bad} of {n}");
    }
    if split.train.iter().any(|i| split.test.contains(i)) {
        bail!(Input, "train and test rows overlap");
    }
    let first = labels[split.train[0]];
    if split.train.iter().all(|&i| labels[i] == first) {
        bail!(Input, "training set holds a single class");
    }
    let c = labels.iter().max().map_or(0, |m| m + 1);
    let x = features.data();

    let nt = split.train.len() as f64;
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for &i in &split.train {
        for j in 0..d {
            mean[j] += x[i * d + j] / nt;
        }
    }
    for &i in &split.train {
        for j in 0..d {
            let dev = x[i * d + j] - mean[j];
            std[j] += dev * dev / nt;
        }
    }
    std.iter_mut().for_each(|s| *s = if *s > 0.0 { libm::sqrt(*s) } else { 1.0 });
    let row = |i: usize| -> Vec<f64> { (0..d).map(|j| (x[i * d + j] - mean[j]) / std[j]).collect() };
    let train: Vec<Vec<f64>> = split.train.iter().map(|&i| row(i)).collect();

    let mut w = vec![0.0; d * c];
    let mut b = vec![0.0; c];
    let lr = 1.0 / (0.5 * (d as f64 + 1.0) + l2_penalty);
    let logits = |w: &[f64], b: &[f64], xi: &[f64]| -> Vec<f64> {
        (0..c).map(|k| b[k] + xi.iter().enumerate().map(|(j, v)| v * w[j * c + k]).sum::<f64>()).collect()
    };
    let mut loss = 0.0;
    for _ in 0..max_iters {
        let mut gw = vec![0.0; d * c];
        let mut gb = vec![0.0; c];
        loss = 0.0;
        for (xi, &i) in train.iter().zip(&split.train) {
            let mut p = logits(&w, &b, xi);
            let m = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = p.iter().map(|v| libm::exp(v - m)).sum();
            loss += m + libm::log(z) - p[labels[i]];
            p.iter_mut().for_each(|v| *v = libm::exp(*v - m) / z);
            p[labels[i]] -= 1.0;
            for k in 0..c {
                gb[k] += p[k] / nt;
                for j in 0..d {
                    gw[j * c + k] += xi[j] * p[k] / nt;
                }
            }
        }
        loss = loss / nt + 0.5 * l2_penalty * w.iter().map(|v| v * v).sum::<f64>();
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= lr * (g + l2_penalty * *wi);
        }
        for (bi, g) in b.iter_mut().zip(&gb) {
            *bi -= lr * g;
        }
    }
    let correct = split
        .test
        .iter()
        .filter(|&&i| {
            let s = logits(&w, &b, &row(i));
            super::zero_shot::top_k(&s, 1)[0] == labels[i]
        })
        .count();
    Ok(ProbeResult { accuracy: correct as f64 / split.test.len() as f64, train_loss: loss, iterations: max_iters })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_two_class() {
        let feats: Vec<f64> = (0..40).flat_map(|i| [if i % 2 == 0 { -1.0 } else { 1.0 } * (1.0 + i as f64 * 0.01), 0.3]).collect();
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let f = Tensor::new(vec![40, 2], feats).unwrap();
        let split = ProbeSplit { train: (0..30).collect(), test: (30..40).collect() };
        let r = linear_probe(&f, &labels, &split, 0.0, 200).unwrap();
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn single_class_rejected() {
        let f = Tensor::zeros(&[4, 2]);
        let split = ProbeSplit { train: vec![0, 1], test: vec![2, 3] };
        assert!(matches!(linear_probe(&f, &[0, 0, 1, 1], &split, 0.0, 5), Err(crate::Error::Input(_))));
    }
}
