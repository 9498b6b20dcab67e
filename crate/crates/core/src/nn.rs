//! Parameter registry and small network building blocks shared by the
//! architecture modules.
//!
//! Parameters live in a flat, named store ([`ParamSet`]); structured layers
//! hold typed [`ParamId`] handles into it. Binding a store to a [`Graph`]
//! registers every tensor as a shared leaf once per graph, so per-example
//! graphs never copy parameter data.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Activation, Graph, NodeId, Tensor};

/// Index of a parameter tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, ordered collection of named parameter tensors. Order is the
/// canonical enumeration used by binding, gradient collection, optimizer
/// state and checkpoints.
#[derive(Clone)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter().map(|t| t.as_ref()))
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| self.tensors[i].as_ref())
    }

    /// Zero-filled gradient buffers parallel to the store, ready for
    /// [`Bound::accumulate_grads`].
    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| vec![0.0; t.numel()]).collect()
    }

    /// Validates every tensor finite; run once per optimizer step rather
    /// than once per example graph.
    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.iter() {
            t.check_finite("param").map_err(|_| {
                Error::config(format!("parameter '{name}' contains non-finite values"))
            })?;
        }
        Ok(())
    }

    /// Registers every parameter as a shared leaf of `g`, in store order.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let ids = self.tensors.iter().map(|t| g.leaf_shared(Arc::clone(t))).collect();
        Bound { ids }
    }

    /// Mutable access for optimizer updates. Cheap when no graph still
    /// holds the tensor (the usual case between batches).
    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[idx])
    }

    pub fn replace(&mut self, idx: usize, t: Tensor) {
        let mut t = t;
        t.set_requires_grad(true);
        self.tensors[idx] = Arc::new(t);
    }
}

/// A [`ParamSet`] registered on one graph: maps [`ParamId`] to that graph's
/// leaf nodes.
pub struct Bound {
    ids: Vec<NodeId>,
}

impl Bound {
    pub fn node(&self, p: ParamId) -> NodeId {
        self.ids[p.0]
    }

    /// Adds each parameter's gradient from `g` into `into` (parallel to the
    /// store). Unreachable leaves contribute zeros.
    pub fn accumulate_grads(&self, g: &Graph, into: &mut [Vec<f64>]) {
        debug_assert_eq!(self.ids.len(), into.len());
        for (i, &id) in self.ids.iter().enumerate() {
            if let Some(grad) = g.grad(id) {
                let dst = &mut into[i];
                for (d, &s) in dst.iter_mut().zip(grad) {
                    *d += s;
                }
            }
        }
    }
}

/// Incrementally builds a [`ParamSet`] with hierarchical dotted names.
pub struct ParamBuilder {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        ParamBuilder { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, mut t: Tensor) -> ParamId {
        t.set_requires_grad(true);
        let id = ParamId(self.tensors.len());
        self.names.push(name.into());
        self.tensors.push(Arc::new(t));
        id
    }

    pub fn finish(self) -> ParamSet {
        ParamSet { names: self.names, tensors: self.tensors }
    }
}

impl Default for ParamBuilder {
    fn default() -> Self {
        ParamBuilder::new()
    }
}

/// Uniform init in `[-bound, bound]`.
pub fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound)).expect("valid init shape")
}

/// Uniform init scaled by the incoming dimension, `[-1/sqrt(fan_in), ..]`.
pub fn fan_in_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    uniform_init(rng, rows, cols, 1.0 / (cols as f64).sqrt())
}

/// How to initialize a linear layer.
#[derive(Debug, Clone, Copy)]
pub enum LinearInit {
    /// Fan-in-scaled uniform weights, zero bias.
    FanIn,
    /// Fan-in-scaled uniform weights, constant bias.
    FanInWithBias(f64),
    /// Zero weights and bias (used where a surrounding identity offset
    /// makes the initial map transparent).
    Zero,
    /// Zero weights, constant bias.
    ZeroWithBias(f64),
}

/// Weight and bias handles of `y = W x + b` applied column-wise.
#[derive(Debug, Clone, Copy)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearIds {
    pub fn create(
        pb: &mut ParamBuilder,
        name: &str,
        out_dim: usize,
        in_dim: usize,
        init: LinearInit,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (w, b) = match init {
            LinearInit::FanIn => (
                fan_in_init(rng, out_dim, in_dim),
                Tensor::zeros(out_dim, 1).expect("bias shape"),
            ),
            LinearInit::FanInWithBias(v) => (
                fan_in_init(rng, out_dim, in_dim),
                Tensor::full(out_dim, 1, v).expect("bias shape"),
            ),
            LinearInit::Zero => (
                Tensor::zeros(out_dim, in_dim).expect("weight shape"),
                Tensor::zeros(out_dim, 1).expect("bias shape"),
            ),
            LinearInit::ZeroWithBias(v) => (
                Tensor::zeros(out_dim, in_dim).expect("weight shape"),
                Tensor::full(out_dim, 1, v).expect("bias shape"),
            ),
        };
        LinearIds {
            w: pb.add(format!("{name}.w"), w),
            b: pb.add(format!("{name}.b"), b),
        }
    }

    pub fn bind(&self, b: &Bound) -> LinearNodes {
        LinearNodes { w: b.node(self.w), b: b.node(self.b) }
    }
}

/// Graph-level handles of a linear layer.
#[derive(Debug, Clone, Copy)]
pub struct LinearNodes {
    pub w: NodeId,
    pub b: NodeId,
}

/// `W x + b`, with `x` holding one sample per column.
pub fn linear_cols(g: &mut Graph, lin: &LinearNodes, x: NodeId) -> Result<NodeId> {
    let wx = g.matmul(lin.w, x)?;
    g.add_bias_cols(wx, lin.b)
}

/// A column-wise multi-layer perceptron.
#[derive(Debug, Clone)]
pub struct MlpIds {
    pub layers: Vec<LinearIds>,
}

impl MlpIds {
    /// `sizes` runs input..output, e.g. `[in, h1, h2, out]`.
    pub fn create(
        pb: &mut ParamBuilder,
        name: &str,
        sizes: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(sizes.len() >= 2, "mlp needs at least input and output sizes");
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                LinearIds::create(pb, &format!("{name}.{i}"), w[1], w[0], LinearInit::FanIn, rng)
            })
            .collect();
        MlpIds { layers }
    }

    pub fn bind(&self, b: &Bound, hidden: Activation, output: Activation) -> MlpNodes {
        MlpNodes {
            layers: self.layers.iter().map(|l| l.bind(b)).collect(),
            hidden,
            output,
        }
    }
}

/// Graph-level MLP: `hidden` activation between layers, `output` after the
/// last (use `Identity` for a linear head).
#[derive(Debug, Clone)]
pub struct MlpNodes {
    pub layers: Vec<LinearNodes>,
    pub hidden: Activation,
    pub output: Activation,
}

pub fn mlp_cols(g: &mut Graph, mlp: &MlpNodes, x: NodeId) -> Result<NodeId> {
    let mut h = x;
    let last = mlp.layers.len() - 1;
    for (i, lin) in mlp.layers.iter().enumerate() {
        h = linear_cols(g, lin, h)?;
        let act = if i == last { mlp.output } else { mlp.hidden };
        if act != Activation::Identity {
            h = g.activation(h, act)?;
        }
    }
    Ok(h)
}
