//! Dense `f64` tensors and a reverse-mode tape.
//!
//! [`Tensor`] owns data plus an optional gradient buffer. Eager helpers on it
//! compute values only; anything that needs derivatives is recorded on a
//! [`Tape`] and differentiated with [`Tape::backward`].

pub mod kernels;
mod tape;

pub use tape::{AttentionGeometry, Gradients, Tape, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {numel} elements but data has {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self> {
        Self::new(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// `(rows, cols)` view of a 2-D tensor, or `(1, n)` for a vector.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape(format!("expected a matrix, got {other:?}"))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 || self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "matmul of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_acc(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (_, n) = self.dims2()?;
        let mut out = self.data.clone();
        out.chunks_exact_mut(n).for_each(kernels::softmax_in_place);
        Tensor::new(self.shape.clone(), out)
    }

    /// Layer normalization over the last dimension with population variance.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (_, n) = self.dims2()?;
        if n < 2 || gamma.numel() != n || beta.numel() != n {
            return Err(Error::Shape(format!(
                "layer_norm over width {n} with gamma {:?} and beta {:?}",
                gamma.shape, beta.shape
            )));
        }
        let mut out = vec![0.0; self.numel()];
        let mut xhat = vec![0.0; n];
        for (x, o) in self.data.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            kernels::layer_norm_row(x, &gamma.data, &beta.data, eps, &mut xhat, o);
        }
        Tensor::new(self.shape.clone(), out)
    }

    pub fn gelu(&self) -> Tensor {
        self.map(kernels::gelu)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (rows, classes) = logits.dims2()?;
    if rows != labels.len() {
        return Err(Error::Shape(format!(
            "{rows} logit rows for {} labels",
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (row, &label) in logits.data.chunks_exact(classes).zip(labels) {
        if label >= classes {
            return Err(Error::Index(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        total += kernels::log_sum_exp(row) - row[label];
    }
    Ok(total / rows as f64)
}
