//! Raw-record embedding: dense projection, sparse lookups, sequence
//! left-padding, and the masking network that fuses multiple sequences
//! into one denoised `d x T` matrix.

use std::sync::Arc;

use crate::data::{FeatureSchema, RawExample};
use crate::error::{Error, Result};
use crate::nn::{linear_cols, mlp_cols, LinearNodes, MlpNodes};
use crate::tensor::{Graph, NodeId, Tensor};

/// Graph handles for the embedding stage of one forward pass.
#[derive(Debug, Clone)]
pub struct EmbedNodes {
    /// `d x m` dense projection; absent when the schema has no dense
    /// features.
    pub w_dense: Option<NodeId>,
    /// One `vocab x d` table per sparse feature, schema order.
    pub sparse_tables: Vec<NodeId>,
    /// One `vocab x d` table per sequence feature, schema order.
    pub seq_tables: Vec<NodeId>,
}

/// Embedded views of one example: the non-sequence matrix, the per-feature
/// sequence matrices, and the shared validity mask.
#[derive(Debug, Clone)]
pub struct EmbeddedExample {
    /// `d x (1 + n)` columns: projected dense block first, then one column
    /// per sparse feature.
    pub x: NodeId,
    /// One `d x T` matrix per sequence feature, left-padded with zero
    /// columns so recent tokens sit rightmost.
    pub seqs: Vec<NodeId>,
    /// `T` flags, true where any sequence feature has a real token.
    pub valid: Vec<bool>,
}

/// Embeds one raw record. Sparse lookups are table-row gathers, so
/// gradient flows back to exactly the touched rows; padding columns are
/// non-learnable zeros.
pub fn embed_example(
    g: &mut Graph,
    schema: &FeatureSchema,
    ex: &RawExample,
    nodes: &EmbedNodes,
) -> Result<EmbeddedExample> {
    let d = schema.embedding_dim;
    let t = schema.max_seq_len;
    let mut columns = Vec::with_capacity(schema.nonseq_columns());

    if schema.dense_count > 0 {
        let w = nodes.w_dense.ok_or_else(|| {
            Error::config("schema has dense features but no dense projection was provided")
        })?;
        if ex.dense.len() != schema.dense_count {
            return Err(Error::ingest(
                "dense",
                format!("expected {} values, got {}", schema.dense_count, ex.dense.len()),
            ));
        }
        let raw = g.constant(Tensor::new(schema.dense_count, 1, ex.dense.clone())?)?;
        columns.push(g.matmul(w, raw)?);
    }

    if nodes.sparse_tables.len() != schema.sparse.len()
        || ex.sparse.len() != schema.sparse.len()
    {
        return Err(Error::ingest(
            "sparse",
            format!(
                "expected {} features, got {} tables and {} indices",
                schema.sparse.len(),
                nodes.sparse_tables.len(),
                ex.sparse.len()
            ),
        ));
    }
    for ((spec, &table), &idx) in
        schema.sparse.iter().zip(&nodes.sparse_tables).zip(&ex.sparse)
    {
        if idx >= spec.vocab {
            return Err(Error::ingest(
                &spec.name,
                format!("index {idx} outside vocabulary of {}", spec.vocab),
            ));
        }
        let row = g.gather_rows(table, Arc::new(vec![idx]))?;
        columns.push(g.transpose(row)?);
    }
    let x = g.concat_cols(&columns)?;

    if nodes.seq_tables.len() != schema.sequences.len()
        || ex.sequences.len() != schema.sequences.len()
    {
        return Err(Error::ingest(
            "sequences",
            format!(
                "expected {} features, got {} tables and {} lists",
                schema.sequences.len(),
                nodes.seq_tables.len(),
                ex.sequences.len()
            ),
        ));
    }
    let mut seqs = Vec::with_capacity(schema.sequences.len());
    let mut valid = vec![false; t];
    for ((spec, &table), tokens) in
        schema.sequences.iter().zip(&nodes.seq_tables).zip(&ex.sequences)
    {
        if tokens.len() > t {
            return Err(Error::ingest(
                &spec.name,
                format!("length {} exceeds the maximum {t}", tokens.len()),
            ));
        }
        for &tok in tokens {
            if tok >= spec.vocab {
                return Err(Error::ingest(
                    &spec.name,
                    format!("token {tok} outside vocabulary of {}", spec.vocab),
                ));
            }
        }
        let seq = if tokens.is_empty() {
            g.constant(Tensor::zeros(d, t)?)?
        } else {
            let rows = g.gather_rows(table, Arc::new(tokens.clone()))?;
            let embedded = g.transpose(rows)?;
            if tokens.len() == t {
                embedded
            } else {
                let pad = g.constant(Tensor::zeros(d, t - tokens.len())?)?;
                g.concat_cols(&[pad, embedded])?
            }
        };
        for i in 0..tokens.len() {
            valid[t - 1 - i] = true;
        }
        seqs.push(seq);
    }
    Ok(EmbeddedExample { x, seqs, valid })
}

/// Weights of the sequence-fusion network: a column-wise gate over the
/// stacked `k*d x T` sequences and a linear combiner down to `d x T`.
#[derive(Debug, Clone)]
pub struct MaskNetNodes {
    /// `k*d -> ... -> k*d`, conventionally ending in a sigmoid so the gate
    /// is a soft selector.
    pub mask_mlp: MlpNodes,
    /// `d x k*d` combiner with bias.
    pub combine: LinearNodes,
}

/// `Combine(S .* Mask(S))` over the stacked sequences: each time step is
/// gated by a network of its own stacked embedding, then the `k` sequences
/// are linearly fused into one `d x T` matrix.
pub fn mask_net(g: &mut Graph, seqs: &[NodeId], nodes: &MaskNetNodes) -> Result<NodeId> {
    if seqs.is_empty() {
        return Err(Error::config("masking network needs at least one sequence"));
    }
    let t = g.value(seqs[0]).cols();
    for &s in seqs {
        if g.value(s).cols() != t {
            return Err(Error::ShapeMismatch {
                op: "mask_net",
                lhs_rows: g.value(seqs[0]).rows(),
                lhs_cols: t,
                rhs_rows: g.value(s).rows(),
                rhs_cols: g.value(s).cols(),
            });
        }
    }
    let stacked = if seqs.len() == 1 { seqs[0] } else { g.concat_rows(seqs)? };
    let gate = mlp_cols(g, &nodes.mask_mlp, stacked)?;
    let gated = g.hadamard(stacked, gate)?;
    linear_cols(g, &nodes.combine, gated)
}

/// Mean over the valid columns of `s`, as one `d x 1` column. All-padding
/// input yields a zero column. Used when the sequence is folded into the
/// non-sequence matrix instead of being modeled.
pub fn mean_pool_valid(g: &mut Graph, s: NodeId, valid: &[bool]) -> Result<NodeId> {
    let t = g.value(s).cols();
    if valid.len() != t {
        return Err(Error::config(format!(
            "validity mask covers {} columns but the sequence has {t}",
            valid.len()
        )));
    }
    let count = valid.iter().filter(|&&v| v).count();
    let mut w = Tensor::zeros(t, 1)?;
    if count > 0 {
        for (i, &ok) in valid.iter().enumerate() {
            if ok {
                w.set(i, 0, 1.0 / count as f64);
            }
        }
    }
    let weights = g.constant(w)?;
    g.matmul(s, weights)
}
