//! Dense 2-D `f64` tensors and reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain row-major value; [`Graph`] is a tape that records
//! operations so a scalar output can be differentiated with respect to any
//! tensor inserted as a gradient-tracked leaf. There is no implicit
//! broadcasting anywhere: every shape coercion is its own operation.

mod graph;

pub use graph::{rope_freq, sigmoid, Activation, Graph, NodeId};

use crate::error::{Error, Result};

/// A dense matrix of `f64` in row-major order. The entry at `(r, c)` lives
/// at `data[r * cols + c]`. Both dimensions are at least 1; values are
/// always finite (enforced at creation and at every graph op boundary).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor from row-major data, rejecting empty dimensions,
    /// length mismatches and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidShape {
                op: "tensor_new",
                rows,
                cols,
                reason: "dimensions must be at least 1".into(),
            });
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidShape {
                op: "tensor_new",
                rows,
                cols,
                reason: format!("data length {} != rows*cols {}", data.len(), rows * cols),
            });
        }
        let t = Tensor { rows, cols, data, requires_grad: false, grad: None };
        t.check_finite("tensor_new")?;
        Ok(t)
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Tensor::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Result<Self> {
        Tensor::new(rows, cols, vec![value; rows * cols])
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Result<Self> {
        let mut t = Tensor::zeros(n, n)?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor::new(rows, cols, data)
    }

    /// Single-column vector from a slice.
    pub fn col_vec(values: &[f64]) -> Result<Self> {
        Tensor::new(values.len(), 1, values.to_vec())
    }

    /// Single-row vector from a slice.
    pub fn row_vec(values: &[f64]) -> Result<Self> {
        Tensor::new(1, values.len(), values.to_vec())
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(1, 1, vec![v])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The value of a 1x1 tensor.
    pub fn item(&self) -> Result<f64> {
        if self.rows != 1 || self.cols != 1 {
            return Err(Error::InvalidShape {
                op: "item",
                rows: self.rows,
                cols: self.cols,
                reason: "expected a 1x1 tensor".into(),
            });
        }
        Ok(self.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Marks the tensor as a trainable leaf for graphs it is inserted into.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, v: bool) {
        self.requires_grad = v;
    }

    /// Accumulated gradient, if `backward` has produced one.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the stored gradient, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let g = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    pub fn scale_grad(&mut self, k: f64) {
        if let Some(g) = self.grad.as_mut() {
            for gi in g.iter_mut() {
                *gi *= k;
            }
        }
    }

    pub(crate) fn check_finite(&self, op: &'static str) -> Result<()> {
        for (i, &v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { op, value: v, row: i / self.cols, col: i % self.cols });
            }
        }
        Ok(())
    }

    /// Frobenius-style max-abs difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: other.rows,
                rhs_cols: other.cols,
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}
