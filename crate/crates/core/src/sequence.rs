//! Context-aware sequence modeling.
//!
//! An attention stack conditioned on the non-sequence summary: each layer
//! applies a summary-derived linear transform to every sequence position
//! (PFFN), then multi-head self-attention with rotary positions in a
//! pre-norm residual block. Attention primitives take tokens as rows;
//! the layer-level functions keep the model-wide `d x tokens` column
//! layout and transpose at the boundary.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::{mlp_cols, MlpNodes};
use crate::tensor::{Graph, NodeId};

/// Rotary position assignment for one attention call: `positions[t]` is the
/// rotation index of token `t`, rotated inside each head's projected space.
#[derive(Debug, Clone)]
pub struct RopeSpec {
    pub positions: Arc<Vec<usize>>,
    pub base: f64,
}

/// `softmax(Q K^T / sqrt(d_k)) V` over rows. `q` is `nq x d_k`, `k` is
/// `nk x d_k`, `v` is `nk x d_v`; the optional mask marks which keys are
/// valid (`false` entries get exactly zero weight).
pub fn scaled_dot_attention(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: Option<&Arc<Vec<bool>>>,
) -> Result<NodeId> {
    let (qt, kt, vt) = (g.value(q), g.value(k), g.value(v));
    if qt.cols() != kt.cols() || kt.rows() != vt.rows() {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_attention",
            lhs_rows: qt.rows(),
            lhs_cols: qt.cols(),
            rhs_rows: kt.rows(),
            rhs_cols: kt.cols(),
        });
    }
    let d_k = qt.cols() as f64;
    let k_t = g.transpose(k)?;
    let scores = g.matmul(q, k_t)?;
    let scaled = g.scale(scores, 1.0 / d_k.sqrt())?;
    let weights = match mask {
        Some(valid) => g.masked_softmax_rows(scaled, Arc::clone(valid))?,
        None => g.softmax_rows(scaled)?,
    };
    g.matmul(weights, v)
}

/// Projection weights for one multi-head attention block. All heads share
/// the stacked matrices; head `i` owns columns `i*d_k .. (i+1)*d_k`.
#[derive(Debug, Clone, Copy)]
pub struct MhaNodes {
    /// `d x (h * d_k)`
    pub wq: NodeId,
    /// `d x (h * d_k)`
    pub wk: NodeId,
    /// `d x (h * d_k)`
    pub wv: NodeId,
    /// `(h * d_k) x d`
    pub wo: NodeId,
    pub heads: usize,
}

/// Multi-head attention over row-token matrices: `queries` is `nq x d`,
/// `keys` is `nk x d` and doubles as the value source. Rotary positions,
/// when given, rotate each head's projected queries and keys; the mask
/// marks valid key tokens.
pub fn multi_head_attention(
    g: &mut Graph,
    queries: NodeId,
    keys: NodeId,
    mha: &MhaNodes,
    rope: Option<&RopeSpec>,
    mask: Option<&Arc<Vec<bool>>>,
) -> Result<NodeId> {
    let h = mha.heads;
    if h == 0 {
        return Err(Error::config("attention needs at least one head"));
    }
    let stacked = g.value(mha.wq).cols();
    if stacked % h != 0 {
        return Err(Error::config(format!(
            "projection width {stacked} is not divisible by {h} heads"
        )));
    }
    let d_k = stacked / h;
    if g.value(mha.wk).cols() != stacked
        || g.value(mha.wv).cols() != stacked
        || g.value(mha.wo).rows() != stacked
    {
        return Err(Error::config(
            "attention projection widths disagree across W_q, W_k, W_v, W_o",
        ));
    }
    let q_all = g.matmul(queries, mha.wq)?;
    let k_all = g.matmul(keys, mha.wk)?;
    let v_all = g.matmul(keys, mha.wv)?;
    let mut heads = Vec::with_capacity(h);
    for i in 0..h {
        let mut q_i = g.slice_cols(q_all, i * d_k, d_k)?;
        let mut k_i = g.slice_cols(k_all, i * d_k, d_k)?;
        let v_i = g.slice_cols(v_all, i * d_k, d_k)?;
        if let Some(spec) = rope {
            q_i = g.rope(q_i, Arc::clone(&spec.positions), spec.base)?;
            k_i = g.rope(k_i, Arc::clone(&spec.positions), spec.base)?;
        }
        heads.push(scaled_dot_attention(g, q_i, k_i, v_i, mask)?);
    }
    let joined = g.concat_cols(&heads)?;
    g.matmul(joined, mha.wo)
}

/// Pooling by multi-head attention: `seeds` (`k_pma x d`) are learned
/// queries attending over the token rows of `tokens`, producing exactly
/// `k_pma` summary tokens.
pub fn pma(
    g: &mut Graph,
    seeds: NodeId,
    tokens: NodeId,
    mha: &MhaNodes,
    mask: Option<&Arc<Vec<bool>>>,
) -> Result<NodeId> {
    multi_head_attention(g, seeds, tokens, mha, None, mask)
}

/// Conditioning network for [`pffn`]: maps the flattened summary
/// (`d * n_sum` entries) to a `d x d` transform, offset by the identity so
/// a zero-initialized output layer starts as a pass-through.
#[derive(Debug, Clone)]
pub struct PffnNodes {
    pub mlp: MlpNodes,
}

/// `f(X_sum) . S`: a summary-conditioned `d x d` linear map applied to the
/// feature dimension of every sequence position. `x_sum` is `d x n_sum`,
/// `s` is `d x T` with tokens as columns.
pub fn pffn(g: &mut Graph, x_sum: NodeId, s: NodeId, nodes: &PffnNodes) -> Result<NodeId> {
    let d = g.value(s).rows();
    if g.value(x_sum).rows() != d {
        return Err(Error::ShapeMismatch {
            op: "pffn",
            lhs_rows: g.value(x_sum).rows(),
            lhs_cols: g.value(x_sum).cols(),
            rhs_rows: d,
            rhs_cols: g.value(s).cols(),
        });
    }
    let flat = g.flatten(x_sum)?;
    let raw = mlp_cols(g, &nodes.mlp, flat)?;
    if g.value(raw).rows() != d * d {
        return Err(Error::InvalidShape {
            op: "pffn",
            rows: g.value(raw).rows(),
            cols: 1,
            reason: "conditioning network must emit d*d entries".to_string(),
        });
    }
    let f = g.reshape(raw, d, d)?;
    let eye = g.constant(crate::tensor::Tensor::eye(d)?)?;
    let transform = g.add(f, eye)?;
    g.matmul(transform, s)
}

/// Prepends the first-layer summary columns as CLS tokens: output columns
/// `0..c_cls` are `cls`, the rest are `s`. `None` leaves `s` untouched.
pub fn prepend_cls(g: &mut Graph, cls: Option<NodeId>, s: NodeId) -> Result<NodeId> {
    match cls {
        None => Ok(s),
        Some(c) => {
            if g.value(c).rows() != g.value(s).rows() {
                return Err(Error::ShapeMismatch {
                    op: "prepend_cls",
                    lhs_rows: g.value(c).rows(),
                    lhs_cols: g.value(c).cols(),
                    rhs_rows: g.value(s).rows(),
                    rhs_cols: g.value(s).cols(),
                });
            }
            g.concat_cols(&[c, s])
        }
    }
}

/// One sequence layer's weights: the conditioning network, the attention
/// block, and the pre-norm affine parameters (`1 x d` each).
#[derive(Debug, Clone)]
pub struct SequenceLayerNodes {
    pub pffn: PffnNodes,
    pub mha: MhaNodes,
    pub ln_gamma: NodeId,
    pub ln_beta: NodeId,
    pub ln_eps: f64,
}

/// `S_{l+1} = P + MHA(rope(LN(P)))` with `P = PFFN(X_sum_l, S_l)`.
/// Shape-preserving on `d x tokens`; the residual keeps stacked layers
/// stable and the norm sits before attention.
pub fn sequence_arch_layer(
    g: &mut Graph,
    s_l: NodeId,
    x_sum_l: NodeId,
    nodes: &SequenceLayerNodes,
    rope: Option<&RopeSpec>,
    mask: Option<&Arc<Vec<bool>>>,
) -> Result<NodeId> {
    let p = pffn(g, x_sum_l, s_l, &nodes.pffn)?;
    let tokens = g.transpose(p)?;
    let normed = g.layer_norm_rows(tokens, nodes.ln_gamma, nodes.ln_beta, nodes.ln_eps)?;
    let att = multi_head_attention(g, normed, normed, &nodes.mha, rope, mask)?;
    let att_cols = g.transpose(att)?;
    g.add(p, att_cols)
}
