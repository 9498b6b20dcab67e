use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`] tape. Only valid for the graph that
/// issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearities available as graph operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
    Swish,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Swish => x * sigmoid(x),
        }
    }

    /// Derivative at `x`.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Swish => "swish",
        };
        f.write_str(s)
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "swish" => Ok(Activation::Swish),
            other => Err(Error::config(format!("unknown activation '{other}'"))),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Leaf storage: owned tensors for per-example data, shared tensors for
/// parameters reused across many per-example graphs without copying.
enum Value {
    Owned(Tensor),
    Shared(Arc<Tensor>),
}

impl Value {
    fn tensor(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Shared(t) => t,
        }
    }
}

enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Hadamard { a: NodeId, b: NodeId },
    Scale { a: NodeId, k: f64 },
    AddBiasCols { a: NodeId, bias: NodeId },
    Act { a: NodeId, kind: Activation },
    Ln { a: NodeId },
    Clamp { a: NodeId, lo: f64, hi: f64 },
    SoftmaxRows { a: NodeId },
    MaskedSoftmaxRows { a: NodeId, valid: Arc<Vec<bool>> },
    LayerNormRows { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Rope { a: NodeId, positions: Arc<Vec<usize>>, base: f64 },
    Transpose { a: NodeId },
    Reshape { a: NodeId },
    ConcatCols { parts: Vec<NodeId> },
    SliceCols { a: NodeId, start: usize },
    GatherRows { table: NodeId, indices: Arc<Vec<usize>> },
    GatherEntries { a: NodeId, entries: Arc<Vec<(usize, usize)>> },
    SumAll { a: NodeId },
}

/// Reverse-mode autodiff tape. Operations append nodes in execution order;
/// [`Graph::backward`] walks the tape in reverse, accumulating gradients
/// for every node that (transitively) depends on a gradient-tracked leaf.
pub struct Graph {
    ops: Vec<Op>,
    values: Vec<Value>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { ops: Vec::new(), values: Vec::new(), needs_grad: Vec::new(), grads: Vec::new() }
    }

    pub fn with_capacity(n: usize) -> Self {
        Graph {
            ops: Vec::with_capacity(n),
            values: Vec::with_capacity(n),
            needs_grad: Vec::with_capacity(n),
            grads: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        self.values[id.0].tensor()
    }

    /// Gradient of the last `backward` target with respect to this node.
    /// `None` until backward runs, or if the node does not require grad.
    /// Nodes that require grad but are unreachable from the loss report
    /// zeros.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.iter_mut() {
            *g = None;
        }
    }

    fn push(&mut self, op: Op, value: Tensor, needs: bool) -> NodeId {
        let id = NodeId(self.ops.len());
        self.ops.push(op);
        self.values.push(Value::Owned(value));
        self.needs_grad.push(needs);
        self.grads.push(None);
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.needs_grad[id.0]
    }

    /// Inserts an owned tensor as a leaf. Gradient tracking follows the
    /// tensor's `requires_grad` flag. Data was validated finite at tensor
    /// creation; tensors mutated since are re-checked here.
    pub fn leaf(&mut self, t: Tensor) -> Result<NodeId> {
        t.check_finite("leaf")?;
        let needs = t.requires_grad();
        let id = NodeId(self.ops.len());
        self.ops.push(Op::Leaf);
        self.values.push(Value::Owned(t));
        self.needs_grad.push(needs);
        self.grads.push(None);
        Ok(id)
    }

    /// Inserts a shared tensor as a leaf without copying its data. The
    /// caller vouches for finiteness (parameters are validated once per
    /// batch, not once per example graph).
    pub fn leaf_shared(&mut self, t: Arc<Tensor>) -> NodeId {
        let needs = t.requires_grad();
        let id = NodeId(self.ops.len());
        self.ops.push(Op::Leaf);
        self.values.push(Value::Shared(t));
        self.needs_grad.push(needs);
        self.grads.push(None);
        id
    }

    /// Inserts a constant (never gradient-tracked).
    pub fn constant(&mut self, mut t: Tensor) -> Result<NodeId> {
        t.check_finite("constant")?;
        t.set_requires_grad(false);
        let id = NodeId(self.ops.len());
        self.ops.push(Op::Leaf);
        self.values.push(Value::Owned(t));
        self.needs_grad.push(false);
        self.grads.push(None);
        Ok(id)
    }

    /// 1x1 constant convenience.
    pub fn scalar(&mut self, v: f64) -> Result<NodeId> {
        self.constant(Tensor::scalar(v)?)
    }

    fn finish(&mut self, op: Op, out: Tensor, needs: bool, name: &'static str) -> Result<NodeId> {
        out.check_finite(name)?;
        Ok(self.push(op, out, needs))
    }

    /// Matrix product `a (m x k) * b (k x n) -> m x n`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs_rows: ta.rows(),
                lhs_cols: ta.cols(),
                rhs_rows: tb.rows(),
                rhs_cols: tb.cols(),
            });
        }
        let out = matmul_raw(ta, tb)?;
        let needs = self.needs(a) || self.needs(b);
        self.finish(Op::MatMul { a, b }, out, needs, "matmul")
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() || ta.cols() != tb.cols() {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs_rows: ta.rows(),
                lhs_cols: ta.cols(),
                rhs_rows: tb.rows(),
                rhs_cols: tb.cols(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.finish(op, out, needs, name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    /// Elementwise product.
    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("hadamard", a, b, |x, y| x * y, Op::Hadamard { a, b })
    }

    /// Multiplies every entry by the constant `k`.
    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        if !k.is_finite() {
            return Err(Error::NonFinite { op: "scale", value: k, row: 0, col: 0 });
        }
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x * k).collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data)?;
        let needs = self.needs(a);
        self.finish(Op::Scale { a, k }, out, needs, "scale")
    }

    /// Adds a column vector `bias (r x 1)` to every column of `a (r x c)`.
    /// The explicit replacement for broadcast addition.
    pub fn add_bias_cols(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.cols() != 1 || tb.rows() != ta.rows() {
            return Err(Error::ShapeMismatch {
                op: "add_bias_cols",
                lhs_rows: ta.rows(),
                lhs_cols: ta.cols(),
                rhs_rows: tb.rows(),
                rhs_cols: tb.cols(),
            });
        }
        let (rows, cols) = (ta.rows(), ta.cols());
        let mut data = ta.data().to_vec();
        for r in 0..rows {
            let bv = tb.data()[r];
            for v in &mut data[r * cols..(r + 1) * cols] {
                *v += bv;
            }
        }
        let out = Tensor::new(rows, cols, data)?;
        let needs = self.needs(a) || self.needs(bias);
        self.finish(Op::AddBiasCols { a, bias }, out, needs, "add_bias_cols")
    }

    /// Pointwise nonlinearity.
    pub fn activation(&mut self, a: NodeId, kind: Activation) -> Result<NodeId> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| kind.apply(x)).collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data)?;
        let needs = self.needs(a);
        self.finish(Op::Act { a, kind }, out, needs, "activation")
    }

    /// Natural logarithm; inputs must be strictly positive (ln(0) would be
    /// -inf, which the eager finiteness check rejects).
    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x.ln()).collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data)?;
        let needs = self.needs(a);
        self.finish(Op::Ln { a }, out, needs, "ln")
    }

    /// Clamps entries into `[lo, hi]`. Gradient passes through entries that
    /// were strictly inside the interval and is zero at clamped entries.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !(lo < hi) {
            return Err(Error::config(format!("clamp bounds out of order: [{lo}, {hi}]")));
        }
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x.clamp(lo, hi)).collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data)?;
        let needs = self.needs(a);
        self.finish(Op::Clamp { a, lo, hi }, out, needs, "clamp")
    }

    /// Row-wise softmax with max-subtraction for overflow safety.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            softmax_row(ta.row(r), &mut data[r * cols..(r + 1) * cols], None)?;
        }
        let out = Tensor::new(rows, cols, data)?;
        let needs = self.needs(a);
        self.finish(Op::SoftmaxRows { a }, out, needs, "softmax_rows")
    }

    /// Row-wise softmax over the columns flagged valid; masked columns get
    /// exactly zero weight, as if their logits were negative infinity.
    /// Errors if no column is valid (every key masked).
    pub fn masked_softmax_rows(&mut self, a: NodeId, valid: Arc<Vec<bool>>) -> Result<NodeId> {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        if valid.len() != cols {
            return Err(Error::InvalidShape {
                op: "masked_softmax_rows",
                rows,
                cols,
                reason: format!("mask length {} != cols {}", valid.len(), cols),
            });
        }
        if !valid.iter().any(|&v| v) {
            return Err(Error::DegenerateAttention);
        }
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            softmax_row(ta.row(r), &mut data[r * cols..(r + 1) * cols], Some(&valid))?;
        }
        let out = Tensor::new(rows, cols, data)?;
        let needs = self.needs(a);
        self.finish(Op::MaskedSoftmaxRows { a, valid }, out, needs, "masked_softmax_rows")
    }

    /// Per-row normalization to mean 0 / variance 1 (guarded by `eps`),
    /// then the affine map `gamma .* xhat + beta`. `gamma` and `beta` are
    /// `1 x cols`.
    pub fn layer_norm_rows(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (rows, cols) = (tx.rows(), tx.cols());
        for (name, t) in [("gamma", tg), ("beta", tb)] {
            if t.rows() != 1 || t.cols() != cols {
                return Err(Error::InvalidShape {
                    op: "layer_norm_rows",
                    rows: t.rows(),
                    cols: t.cols(),
                    reason: format!("{name} must be 1x{cols}"),
                });
            }
        }
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for c in 0..cols {
                let xhat = (row[c] - mean) * inv_std;
                data[r * cols + c] = tg.data()[c] * xhat + tb.data()[c];
            }
        }
        let out = Tensor::new(rows, cols, data)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.finish(Op::LayerNormRows { x, gamma, beta, eps }, out, needs, "layer_norm_rows")
    }

    /// Rotary position encoding. Rows are tokens; `positions[r]` is the
    /// position of row `r`. Consecutive column pairs `(2i, 2i+1)` are
    /// rotated by `positions[r] * base^(-2i/cols)`. Columns must be even.
    pub fn rope(&mut self, a: NodeId, positions: Arc<Vec<usize>>, base: f64) -> Result<NodeId> {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        if cols % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "rope",
                rows,
                cols,
                reason: "column count must be even to form rotation pairs".into(),
            });
        }
        if positions.len() != rows {
            return Err(Error::InvalidShape {
                op: "rope",
                rows,
                cols,
                reason: format!("positions length {} != rows {}", positions.len(), rows),
            });
        }
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = ta.row(r);
            let pos = positions[r] as f64;
            for i in 0..cols / 2 {
                let theta = pos * rope_freq(base, i, cols);
                let (sin, cos) = theta.sin_cos();
                let (x0, x1) = (row[2 * i], row[2 * i + 1]);
                data[r * cols + 2 * i] = x0 * cos - x1 * sin;
                data[r * cols + 2 * i + 1] = x0 * sin + x1 * cos;
            }
        }
        let out = Tensor::new(rows, cols, data)?;
        let needs = self.needs(a);
        self.finish(Op::Rope { a, positions, base }, out, needs, "rope")
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = ta.data()[r * cols + c];
            }
        }
        let out = Tensor::new(cols, rows, data)?;
        let needs = self.needs(a);
        self.finish(Op::Transpose { a }, out, needs, "transpose")
    }

    /// Reinterprets the row-major data with a new shape; entry order is
    /// unchanged and `rows * cols` must match.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let ta = self.value(a);
        if rows * cols != ta.numel() || rows == 0 || cols == 0 {
            return Err(Error::InvalidShape {
                op: "reshape",
                rows,
                cols,
                reason: format!("cannot view {}x{} as {}x{}", ta.rows(), ta.cols(), rows, cols),
            });
        }
        let out = Tensor::new(rows, cols, ta.data().to_vec())?;
        let needs = self.needs(a);
        self.finish(Op::Reshape { a }, out, needs, "reshape")
    }

    /// Flattens to a single column in row-major entry order.
    pub fn flatten(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).numel();
        self.reshape(a, n, 1)
    }

    /// Concatenates tensors left-to-right; all parts share the row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::config("concat_cols needs at least one part"));
        }
        let rows = self.value(parts[0]).rows();
        let mut total_cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs_rows: rows,
                    lhs_cols: total_cols,
                    rhs_rows: t.rows(),
                    rhs_cols: t.cols(),
                });
            }
            total_cols += t.cols();
        }
        let mut data = vec![0.0; rows * total_cols];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for r in 0..rows {
                data[r * total_cols + off..r * total_cols + off + c].copy_from_slice(t.row(r));
            }
            off += c;
        }
        let out = Tensor::new(rows, total_cols, data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        self.finish(Op::ConcatCols { parts: parts.to_vec() }, out, needs, "concat_cols")
    }

    /// Columns `start .. start + len` of `a`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        if len == 0 || start + len > cols {
            return Err(Error::IndexOutOfBounds { op: "slice_cols", index: start + len, bound: cols });
        }
        let mut data = vec![0.0; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len].copy_from_slice(&ta.row(r)[start..start + len]);
        }
        let out = Tensor::new(rows, len, data)?;
        let needs = self.needs(a);
        self.finish(Op::SliceCols { a, start }, out, needs, "slice_cols")
    }

    /// Selects rows of `table` by index (embedding lookup). Gradients
    /// scatter-add back into the table rows.
    pub fn gather_rows(&mut self, table: NodeId, indices: Arc<Vec<usize>>) -> Result<NodeId> {
        let tt = self.value(table);
        let (rows, cols) = (tt.rows(), tt.cols());
        if indices.is_empty() {
            return Err(Error::config("gather_rows needs at least one index"));
        }
        for &i in indices.iter() {
            if i >= rows {
                return Err(Error::IndexOutOfBounds { op: "gather_rows", index: i, bound: rows });
            }
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices.iter() {
            data.extend_from_slice(tt.row(i));
        }
        let out = Tensor::new(indices.len(), cols, data)?;
        let needs = self.needs(table);
        self.finish(Op::GatherRows { table, indices }, out, needs, "gather_rows")
    }

    /// Selects individual entries `(r, c)` into a column vector.
    pub fn gather_entries(&mut self, a: NodeId, entries: Arc<Vec<(usize, usize)>>) -> Result<NodeId> {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        if entries.is_empty() {
            return Err(Error::config("gather_entries needs at least one entry"));
        }
        let mut data = Vec::with_capacity(entries.len());
        for &(r, c) in entries.iter() {
            if r >= rows || c >= cols {
                return Err(Error::IndexOutOfBounds { op: "gather_entries", index: r * cols + c, bound: rows * cols });
            }
            data.push(ta.get(r, c));
        }
        let out = Tensor::new(entries.len(), 1, data)?;
        let needs = self.needs(a);
        self.finish(Op::GatherEntries { a, entries }, out, needs, "gather_entries")
    }

    /// Stacks tensors top-to-bottom. Composed from transposes and a column
    /// concat, so no dedicated backward rule is needed.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let transposed: Vec<NodeId> = parts
            .iter()
            .map(|&p| self.transpose(p))
            .collect::<Result<_>>()?;
        let wide = self.concat_cols(&transposed)?;
        self.transpose(wide)
    }

    /// Sum of all entries as a 1x1 tensor.
    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(a).data().iter().sum();
        let out = Tensor::scalar(s)?;
        let needs = self.needs(a);
        self.finish(Op::SumAll { a }, out, needs, "sum_all")
    }

    /// Reverse pass from a scalar loss. Every gradient-tracked leaf ends up
    /// with a gradient buffer; leaves unreachable from the loss get zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lt = self.value(loss);
        if lt.rows() != 1 || lt.cols() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                rows: lt.rows(),
                cols: lt.cols(),
                reason: "loss must be a 1x1 tensor".into(),
            });
        }
        self.zero_grads();
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.needs_grad[i] {
                continue;
            }
            let g = self.grads[i].take().expect("grad present");
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        // Requires-grad leaves untouched by the reverse walk report zeros.
        for i in 0..self.ops.len() {
            if matches!(self.ops[i], Op::Leaf) && self.needs_grad[i] && self.grads[i].is_none() {
                self.grads[i] = Some(vec![0.0; self.values[i].tensor().numel()]);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.needs_grad[id.0] {
            return;
        }
        let n = self.values[id.0].tensor().numel();
        let g = self.grads[id.0].get_or_insert_with(|| vec![0.0; n]);
        f(g);
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Ops are cheap to match on; each arm reads input values immutably
        // and accumulates into input grads via `accumulate`.
        match &self.ops[i] {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let (m, k) = (self.value(a).rows(), self.value(a).cols());
                let n = self.value(b).cols();
                // da = g * b^T
                let bt = self.value(b).data().to_vec();
                self.accumulate(a, |da| {
                    for r in 0..m {
                        for c in 0..k {
                            let mut acc = 0.0;
                            let grow = &g[r * n..(r + 1) * n];
                            let brow = &bt[c * n..(c + 1) * n];
                            for j in 0..n {
                                acc += grow[j] * brow[j];
                            }
                            da[r * k + c] += acc;
                        }
                    }
                });
                // db = a^T * g
                let ad = self.value(a).data().to_vec();
                self.accumulate(b, |db| {
                    for r in 0..k {
                        for c in 0..m {
                            let av = ad[c * k + r];
                            if av == 0.0 {
                                continue;
                            }
                            let grow = &g[c * n..(c + 1) * n];
                            let drow = &mut db[r * n..(r + 1) * n];
                            for j in 0..n {
                                drow[j] += av * grow[j];
                            }
                        }
                    }
                });
            }
            &Op::Add { a, b } => {
                self.accumulate(a, |da| add_assign(da, g, 1.0));
                self.accumulate(b, |db| add_assign(db, g, 1.0));
            }
            &Op::Sub { a, b } => {
                self.accumulate(a, |da| add_assign(da, g, 1.0));
                self.accumulate(b, |db| add_assign(db, g, -1.0));
            }
            &Op::Hadamard { a, b } => {
                let bd = self.value(b).data().to_vec();
                self.accumulate(a, |da| {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(&bd) {
                        *d += gv * bv;
                    }
                });
                let ad = self.value(a).data().to_vec();
                self.accumulate(b, |db| {
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(&ad) {
                        *d += gv * av;
                    }
                });
            }
            &Op::Scale { a, k } => {
                self.accumulate(a, |da| add_assign(da, g, k));
            }
            &Op::AddBiasCols { a, bias } => {
                let cols = self.value(a).cols();
                let rows = self.value(a).rows();
                self.accumulate(a, |da| add_assign(da, g, 1.0));
                self.accumulate(bias, |db| {
                    for r in 0..rows {
                        db[r] += g[r * cols..(r + 1) * cols].iter().sum::<f64>();
                    }
                });
            }
            &Op::Act { a, kind } => {
                let xd = self.value(a).data().to_vec();
                self.accumulate(a, |da| {
                    for ((d, &gv), &x) in da.iter_mut().zip(g).zip(&xd) {
                        *d += gv * kind.derivative(x);
                    }
                });
            }
            &Op::Ln { a } => {
                let xd = self.value(a).data().to_vec();
                self.accumulate(a, |da| {
                    for ((d, &gv), &x) in da.iter_mut().zip(g).zip(&xd) {
                        *d += gv / x;
                    }
                });
            }
            &Op::Clamp { a, lo, hi } => {
                let xd = self.value(a).data().to_vec();
                self.accumulate(a, |da| {
                    for ((d, &gv), &x) in da.iter_mut().zip(g).zip(&xd) {
                        if x > lo && x < hi {
                            *d += gv;
                        }
                    }
                });
            }
            &Op::SoftmaxRows { a } => {
                let s = self.values[i].tensor().data().to_vec();
                let cols = self.value(a).cols();
                self.accumulate(a, |da| softmax_backward(da, g, &s, cols, None));
            }
            Op::MaskedSoftmaxRows { a, valid } => {
                let a = *a;
                let valid = Arc::clone(valid);
                let s = self.values[i].tensor().data().to_vec();
                let cols = self.value(a).cols();
                self.accumulate(a, |da| softmax_backward(da, g, &s, cols, Some(&valid)));
            }
            &Op::LayerNormRows { x, gamma, beta, eps } => {
                let tx = self.value(x);
                let (rows, cols) = (tx.rows(), tx.cols());
                let xd = tx.data().to_vec();
                let gd = self.value(gamma).data().to_vec();
                // Recompute per-row statistics; cheaper than storing them.
                let mut xhat = vec![0.0; rows * cols];
                let mut inv_std = vec![0.0; rows];
                for r in 0..rows {
                    let row = &xd[r * cols..(r + 1) * cols];
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                    inv_std[r] = 1.0 / (var + eps).sqrt();
                    for c in 0..cols {
                        xhat[r * cols + c] = (row[c] - mean) * inv_std[r];
                    }
                }
                self.accumulate(gamma, |dg| {
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                });
                self.accumulate(beta, |db| {
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += g[r * cols + c];
                        }
                    }
                });
                self.accumulate(x, |dx| {
                    let n = cols as f64;
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let xr = &xhat[r * cols..(r + 1) * cols];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for c in 0..cols {
                            let dxh = gr[c] * gd[c];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xr[c];
                        }
                        for c in 0..cols {
                            let dxh = gr[c] * gd[c];
                            dx[r * cols + c] +=
                                inv_std[r] / n * (n * dxh - sum_dxhat - xr[c] * sum_dxhat_xhat);
                        }
                    }
                });
            }
            Op::Rope { a, positions, base } => {
                let a = *a;
                let base = *base;
                let positions = Arc::clone(positions);
                let cols = self.value(a).cols();
                let rows = self.value(a).rows();
                // The inverse of a rotation is the rotation by -theta.
                self.accumulate(a, |da| {
                    for r in 0..rows {
                        let pos = positions[r] as f64;
                        for p in 0..cols / 2 {
                            let theta = pos * rope_freq(base, p, cols);
                            let (sin, cos) = theta.sin_cos();
                            let g0 = g[r * cols + 2 * p];
                            let g1 = g[r * cols + 2 * p + 1];
                            da[r * cols + 2 * p] += g0 * cos + g1 * sin;
                            da[r * cols + 2 * p + 1] += -g0 * sin + g1 * cos;
                        }
                    }
                });
            }
            &Op::Transpose { a } => {
                let (rows, cols) = (self.value(a).rows(), self.value(a).cols());
                self.accumulate(a, |da| {
                    for r in 0..rows {
                        for c in 0..cols {
                            da[r * cols + c] += g[c * rows + r];
                        }
                    }
                });
            }
            &Op::Reshape { a } => {
                self.accumulate(a, |da| add_assign(da, g, 1.0));
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let rows = self.values[i].tensor().rows();
                let total = self.values[i].tensor().cols();
                let mut off = 0;
                for p in parts {
                    let c = self.value(p).cols();
                    let start = off;
                    self.accumulate(p, |dp| {
                        for r in 0..rows {
                            for j in 0..c {
                                dp[r * c + j] += g[r * total + start + j];
                            }
                        }
                    });
                    off += c;
                }
            }
            &Op::SliceCols { a, start } => {
                let cols = self.value(a).cols();
                let rows = self.value(a).rows();
                let len = self.values[i].tensor().cols();
                self.accumulate(a, |da| {
                    for r in 0..rows {
                        for j in 0..len {
                            da[r * cols + start + j] += g[r * len + j];
                        }
                    }
                });
            }
            Op::GatherRows { table, indices } => {
                let table = *table;
                let indices = Arc::clone(indices);
                let cols = self.value(table).cols();
                self.accumulate(table, |dt| {
                    for (out_r, &src_r) in indices.iter().enumerate() {
                        for c in 0..cols {
                            dt[src_r * cols + c] += g[out_r * cols + c];
                        }
                    }
                });
            }
            Op::GatherEntries { a, entries } => {
                let a = *a;
                let entries = Arc::clone(entries);
                let cols = self.value(a).cols();
                self.accumulate(a, |da| {
                    for (k, &(r, c)) in entries.iter().enumerate() {
                        da[r * cols + c] += g[k];
                    }
                });
            }
            &Op::SumAll { a } => {
                let gv = g[0];
                self.accumulate(a, |da| {
                    for d in da.iter_mut() {
                        *d += gv;
                    }
                });
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

fn add_assign(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s * k;
    }
}

/// Rotation frequency for pair index `i` of a `dim`-wide embedding.
pub fn rope_freq(base: f64, pair: usize, dim: usize) -> f64 {
    base.powf(-2.0 * pair as f64 / dim as f64)
}

fn softmax_row(input: &[f64], out: &mut [f64], valid: Option<&[bool]>) -> Result<()> {
    let is_valid = |c: usize| valid.map_or(true, |v| v[c]);
    let mut max = f64::NEG_INFINITY;
    for (c, &v) in input.iter().enumerate() {
        if is_valid(c) && v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for (c, &v) in input.iter().enumerate() {
        if is_valid(c) {
            let e = (v - max).exp();
            out[c] = e;
            sum += e;
        } else {
            out[c] = 0.0;
        }
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    Ok(())
}

fn softmax_backward(da: &mut [f64], g: &[f64], s: &[f64], cols: usize, valid: Option<&[bool]>) {
    let rows = s.len() / cols;
    let is_valid = |c: usize| valid.map_or(true, |v| v[c]);
    for r in 0..rows {
        let srow = &s[r * cols..(r + 1) * cols];
        let grow = &g[r * cols..(r + 1) * cols];
        let dot: f64 = srow
            .iter()
            .zip(grow)
            .enumerate()
            .filter(|(c, _)| is_valid(*c))
            .map(|(_, (&sv, &gv))| sv * gv)
            .sum();
        for c in 0..cols {
            if is_valid(c) {
                da[r * cols + c] += srow[c] * (grow[c] - dot);
            }
        }
    }
}

fn matmul_raw(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut data = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for r in 0..m {
        let out_row = &mut data[r * n..(r + 1) * n];
        for p in 0..k {
            let av = ad[r * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += av * brow[j];
            }
        }
    }
    Tensor::new(m, n, data)
}
