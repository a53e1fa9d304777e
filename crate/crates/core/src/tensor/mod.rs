//! Dense `f64` tensors and a define-by-run reverse-mode tape.
//!
//! [`Tensor`] is a plain value: a shape and a row-major buffer. Differentiable
//! computation happens on a [`Tape`], which records every operation applied to
//! [`Var`] handles and replays them backwards in [`Tape::backward`]. A fresh
//! tape is built for each forward pass.

pub mod gradcheck;
mod kernels;
mod nn;
mod tape;

pub use nn::causal_mask;
pub use tape::{Gradients, Tape, Var};

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};

/// Row-major dense tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            bail!(
                Dimension,
                "shape {:?} holds {} elements but {} values were given",
                shape,
                numel,
                data.len()
            );
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    /// 1-D tensor from a slice.
    pub fn from_slice(values: &[f64]) -> Self {
        Self { shape: vec![values.len()], data: values.to_vec() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            bail!(Dimension, "item() on tensor of shape {:?}", self.shape);
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            bail!(Dimension, "cannot reshape {:?} into {:?}", self.shape, shape);
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Rows `[start, end)` along the first axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let Some(&rows) = self.shape.first() else {
            bail!(Dimension, "slice_rows on a scalar");
        };
        if start > end || end > rows {
            bail!(Dimension, "row range {start}..{end} out of bounds for {rows} rows");
        }
        let row_len = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self { shape, data: self.data[start * row_len..end * row_len].to_vec() })
    }

    /// Gathers rows along the first axis.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let Some(&rows) = self.shape.first() else {
            bail!(Dimension, "select_rows on a scalar");
        };
        let row_len = self.row_len();
        let mut data = Vec::with_capacity(indices.len() * row_len);
        for &i in indices {
            if i >= rows {
                bail!(Dimension, "row index {i} out of bounds for {rows} rows");
            }
            data.extend_from_slice(&self.data[i * row_len..(i + 1) * row_len]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Self { shape, data })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Self> {
        let Some(first) = parts.first() else {
            bail!(Dimension, "stack of zero tensors");
        };
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                bail!(Dimension, "stack shape mismatch {:?} vs {:?}", p.shape, first.shape);
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// Concatenates tensors along their existing first axis.
    pub fn stack_rows(parts: &[Tensor]) -> Result<Self> {
        let Some(first) = parts.first() else {
            bail!(Dimension, "concatenation of zero tensors");
        };
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.rank() == 0 || p.shape[1..] != first.shape[1..] {
                bail!(Dimension, "row concatenation mismatch {:?} vs {:?}", p.shape, first.shape);
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Self { shape, data })
    }

    /// Elements per index of the first axis.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn l2_norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Copy of a `[n, d]` matrix with every row scaled to unit L2 norm.
pub fn normalize_rows(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        bail!(Dimension, "normalize_rows expects rank 2, got {:?}", x.shape());
    }
    let d = x.shape()[1];
    let mut out = x.clone();
    for (r, row) in out.data_mut().chunks_mut(d.max(1)).enumerate() {
        let norm = libm::sqrt(row.iter().map(|v| v * v).sum());
        if !(norm > 0.0) || !norm.is_finite() {
            bail!(Numeric, "row {r} has norm {norm}; cannot normalise");
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

/// Dot product of two equally long slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    kernels::dot(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s = Tensor::scalar(3.0);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.item().unwrap(), 3.0);
    }

    #[test]
    fn select_and_slice_rows() {
        let t = Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(t.select_rows(&[2, 0]).unwrap().data(), &[5., 6., 1., 2.]);
        assert_eq!(t.slice_rows(1, 3).unwrap().data(), &[3., 4., 5., 6.]);
        assert!(t.select_rows(&[3]).is_err());
    }

    #[test]
    fn normalize_rows_rejects_zero_row() {
        let t = Tensor::new(vec![2, 2], vec![3., 4., 0., 0.]).unwrap();
        assert!(normalize_rows(&t).is_err());
        let ok = normalize_rows(&t.slice_rows(0, 1).unwrap()).unwrap();
        assert_eq!(ok.data(), &[0.6, 0.8]);
    }
}
