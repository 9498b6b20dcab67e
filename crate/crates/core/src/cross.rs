//! Information exchange between the interaction and sequence arches.
//!
//! Each side of the model condenses its state into a handful of summary
//! columns for the other side: the feature matrix is compressed over its
//! column dimension and self-gated; the sequence is condensed into CLS,
//! pooled-attention, and most-recent token blocks. Summary widths are
//! fixed by configuration, never by per-example sequence length, so shapes
//! downstream stay static.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::{mlp_cols, MlpNodes};
use crate::sequence::{pma, MhaNodes};
use crate::tensor::{Activation, Graph, NodeId, Tensor};

/// Gate network plus the outer activation for [`self_gating`].
#[derive(Debug, Clone)]
pub struct GatingNodes {
    /// Column-wise network mapping each column to a same-length gate.
    pub mlp: MlpNodes,
    /// Applied to the gated product. Identity keeps the value range open;
    /// sigmoid or tanh squash it.
    pub sigma: Activation,
}

/// `sigma(X .* MLP(X))`: each entry is scaled by a learned gate derived
/// from its own column, then passed through the outer activation.
pub fn self_gating(g: &mut Graph, x: NodeId, nodes: &GatingNodes) -> Result<NodeId> {
    let gate = mlp_cols(g, &nodes.mlp, x)?;
    let prod = g.hadamard(x, gate)?;
    g.activation(prod, nodes.sigma)
}

/// Linear compression along the column (feature-count) dimension:
/// `X (d x N) . W (N x M)` with `M <= N`.
pub fn lce(g: &mut Graph, x: NodeId, w: NodeId) -> Result<NodeId> {
    let (n, m) = (g.value(x).cols(), g.value(w).cols());
    if m > n {
        return Err(Error::config(format!(
            "column compression cannot widen: {n} columns into {m}"
        )));
    }
    g.matmul(x, w)
}

/// Weights for the non-sequence summary.
#[derive(Debug, Clone)]
pub struct NonSeqSummaryNodes {
    /// `N x n_sum` mixing matrix.
    pub lce_w: NodeId,
    pub gating: GatingNodes,
}

/// Compresses `X_l (d x N)` to `d x n_sum` columns and self-gates them.
/// Strict compression: `n_sum` must be below the input column count.
pub fn summarize_nonseq(g: &mut Graph, x_l: NodeId, nodes: &NonSeqSummaryNodes) -> Result<NodeId> {
    let (n, m) = (g.value(x_l).cols(), g.value(nodes.lce_w).cols());
    if m >= n {
        return Err(Error::config(format!(
            "summary width {m} must be smaller than the {n} input columns"
        )));
    }
    let compressed = lce(g, x_l, nodes.lce_w)?;
    self_gating(g, compressed, &nodes.gating)
}

/// Weights for the sequence summary.
#[derive(Debug, Clone)]
pub struct SeqSummaryNodes {
    /// `k_pma x d` learned pooling queries.
    pub pma_seeds: NodeId,
    pub pma_mha: MhaNodes,
    pub gating: GatingNodes,
    /// How many rightmost valid tokens to copy out verbatim.
    pub k_recent: usize,
}

/// Builds the `d x (c_cls + k_pma + k_recent)` sequence summary from
/// `S_l (d x (c_cls + T))`:
///
/// * the first `c_cls` columns are copied through,
/// * `k_pma` columns pool the whole token set (CLS included, so an
///   all-padding sequence still yields a context summary),
/// * `k_recent` columns select the rightmost valid tokens, right-aligned,
///   with zero columns filling any missing slots.
///
/// The result is self-gated. `valid` flags the `T` sequence tokens;
/// padding tokens are never attended to and never selected as recent.
pub fn summarize_seq(
    g: &mut Graph,
    s_l: NodeId,
    c_cls: usize,
    nodes: &SeqSummaryNodes,
    valid: &[bool],
) -> Result<NodeId> {
    let total = g.value(s_l).cols();
    if total <= c_cls {
        return Err(Error::InvalidShape {
            op: "summarize_seq",
            rows: g.value(s_l).rows(),
            cols: total,
            reason: format!("needs at least one sequence token after {c_cls} context columns"),
        });
    }
    let t = total - c_cls;
    if valid.len() != t {
        return Err(Error::config(format!(
            "validity mask covers {} tokens but the sequence has {t}",
            valid.len()
        )));
    }
    let mut parts = Vec::with_capacity(3);
    if c_cls > 0 {
        parts.push(g.slice_cols(s_l, 0, c_cls)?);
    }

    let tokens = g.transpose(s_l)?;
    let mut key_mask = vec![true; c_cls];
    key_mask.extend_from_slice(valid);
    let pooled = pma(g, nodes.pma_seeds, tokens, &nodes.pma_mha, Some(&Arc::new(key_mask)))?;
    parts.push(g.transpose(pooled)?);

    if nodes.k_recent > 0 {
        let chosen: Vec<usize> = (0..t).filter(|&i| valid[i]).collect();
        let take = chosen.len().min(nodes.k_recent);
        let mut sel = Tensor::zeros(t, nodes.k_recent)?;
        // Newest token lands in the last slot; unfilled slots stay zero.
        for j in 0..take {
            let slot = nodes.k_recent - take + j;
            let src = chosen[chosen.len() - take + j];
            sel.set(src, slot, 1.0);
        }
        let seq_block = g.slice_cols(s_l, c_cls, t)?;
        let sel_node = g.constant(sel)?;
        parts.push(g.matmul(seq_block, sel_node)?);
    }

    let cat = g.concat_cols(&parts)?;
    self_gating(g, cat, &nodes.gating)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LinearNodes;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.5..1.5)).unwrap()
    }

    /// Single affine layer emitting a constant, regardless of input.
    fn constant_gate(g: &mut Graph, d: usize, value: f64, sigma: Activation) -> GatingNodes {
        let w = g.leaf(Tensor::zeros(d, d).unwrap()).unwrap();
        let b = g.leaf(Tensor::full(d, 1, value).unwrap()).unwrap();
        GatingNodes {
            mlp: MlpNodes {
                layers: vec![LinearNodes { w, b }],
                hidden: Activation::Swish,
                output: Activation::Identity,
            },
            sigma,
        }
    }

    fn rand_gate(g: &mut Graph, rng: &mut ChaCha8Rng, d: usize, sigma: Activation) -> GatingNodes {
        let w1 = g.leaf(rand_tensor(rng, 5, d)).unwrap();
        let b1 = g.leaf(rand_tensor(rng, 5, 1)).unwrap();
        let w2 = g.leaf(rand_tensor(rng, d, 5)).unwrap();
        let b2 = g.leaf(rand_tensor(rng, d, 1)).unwrap();
        GatingNodes {
            mlp: MlpNodes {
                layers: vec![LinearNodes { w: w1, b: b1 }, LinearNodes { w: w2, b: b2 }],
                hidden: Activation::Swish,
                output: Activation::Identity,
            },
            sigma,
        }
    }

    #[test]
    fn gating_with_unit_gates_and_identity_sigma_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x_val = rand_tensor(&mut rng, 4, 3);
        let x = g.leaf(x_val.clone()).unwrap();
        let nodes = constant_gate(&mut g, 4, 1.0, Activation::Identity);
        let out = self_gating(&mut g, x, &nodes).unwrap();
        assert_eq!(g.value(out).data(), x_val.data());
    }

    #[test]
    fn gating_with_zero_gates_and_identity_sigma_silences_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let x = g.leaf(rand_tensor(&mut rng, 4, 3)).unwrap();
        let nodes = constant_gate(&mut g, 4, 0.0, Activation::Identity);
        let out = self_gating(&mut g, x, &nodes).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gating_with_zero_gates_and_sigmoid_sigma_is_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.leaf(rand_tensor(&mut rng, 3, 5)).unwrap();
        let nodes = constant_gate(&mut g, 3, 0.0, Activation::Sigmoid);
        let out = self_gating(&mut g, x, &nodes).unwrap();
        assert!(g.value(out).data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn lce_with_identity_mixing_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let x_val = rand_tensor(&mut rng, 3, 4);
        let x = g.leaf(x_val.clone()).unwrap();
        let w = g.leaf(Tensor::eye(4).unwrap()).unwrap();
        let out = lce(&mut g, x, w).unwrap();
        assert_eq!(g.value(out).data(), x_val.data());
    }

    #[test]
    fn lce_with_uniform_column_is_mean_pooling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x_val = rand_tensor(&mut rng, 3, 4);
        let x = g.leaf(x_val.clone()).unwrap();
        let w = g.leaf(Tensor::full(4, 1, 0.25).unwrap()).unwrap();
        let out = lce(&mut g, x, w).unwrap();
        for r in 0..3 {
            let mean: f64 = (0..4).map(|c| x_val.get(r, c)).sum::<f64>() / 4.0;
            assert!((g.value(out).get(r, 0) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn lce_refuses_to_widen() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::new();
        let x = g.leaf(rand_tensor(&mut rng, 3, 2)).unwrap();
        let w = g.leaf(rand_tensor(&mut rng, 2, 5)).unwrap();
        assert!(matches!(lce(&mut g, x, w), Err(Error::Config(_))));
    }

    #[test]
    fn lce_matches_triple_loop_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (d, n) = (rng.gen_range(1..5), rng.gen_range(2..6));
            let m = rng.gen_range(1..=n);
            let x = rand_tensor(&mut rng, d, n);
            let w = rand_tensor(&mut rng, n, m);
            let mut g = Graph::new();
            let (ix, iw) = (g.leaf(x.clone()).unwrap(), g.leaf(w.clone()).unwrap());
            let out = lce(&mut g, ix, iw).unwrap();
            for r in 0..d {
                for c in 0..m {
                    let mut acc = 0.0;
                    for k in 0..n {
                        acc += x.get(r, k) * w.get(k, c);
                    }
                    assert!((g.value(out).get(r, c) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn nonseq_summary_has_the_configured_width_and_transparent_gating() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Graph::new();
        let x = g.leaf(rand_tensor(&mut rng, 4, 6)).unwrap();
        let w_val = rand_tensor(&mut rng, 6, 2);
        let w = g.leaf(w_val).unwrap();
        let nodes = NonSeqSummaryNodes {
            lce_w: w,
            gating: constant_gate(&mut g, 4, 1.0, Activation::Identity),
        };
        let out = summarize_nonseq(&mut g, x, &nodes).unwrap();
        assert_eq!((g.value(out).rows(), g.value(out).cols()), (4, 2));
        let plain = lce(&mut g, x, w).unwrap();
        assert_eq!(g.value(out).data(), g.value(plain).data());
    }

    #[test]
    fn nonseq_summary_rejects_non_compressing_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let x = g.leaf(rand_tensor(&mut rng, 4, 3)).unwrap();
        let w = g.leaf(rand_tensor(&mut rng, 3, 3)).unwrap();
        let nodes = NonSeqSummaryNodes {
            lce_w: w,
            gating: constant_gate(&mut g, 4, 1.0, Activation::Identity),
        };
        assert!(matches!(summarize_nonseq(&mut g, x, &nodes), Err(Error::Config(_))));
    }

    #[test]
    fn nonseq_summary_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (d, n, m) = (3, 5, 2);
        let x_val = rand_tensor(&mut rng, d, n);
        let w_val = rand_tensor(&mut rng, n, m);
        let gate_seed = 11;

        let run = |x_data: &[f64]| -> (f64, Option<Vec<f64>>) {
            let mut g = Graph::new();
            let mut grng = ChaCha8Rng::seed_from_u64(gate_seed);
            let x = g
                .leaf(Tensor::new(d, n, x_data.to_vec()).unwrap().with_grad())
                .unwrap();
            let nodes = NonSeqSummaryNodes {
                lce_w: g.leaf(w_val.clone()).unwrap(),
                gating: rand_gate(&mut g, &mut grng, d, Activation::Sigmoid),
            };
            let out = summarize_nonseq(&mut g, x, &nodes).unwrap();
            let loss = g.sum_all(out).unwrap();
            g.backward(loss).unwrap();
            (g.value(loss).item().unwrap(), g.grad(x).map(|v| v.to_vec()))
        };

        let (_, grad) = run(x_val.data());
        let grad = grad.unwrap();
        let eps = 1e-5;
        for i in 0..x_val.numel() {
            let mut plus = x_val.data().to_vec();
            plus[i] += eps;
            let mut minus = x_val.data().to_vec();
            minus[i] -= eps;
            let fd = (run(&plus).0 - run(&minus).0) / (2.0 * eps);
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-3);
            assert!(rel < 1e-4, "coord {i}: analytic {} vs fd {}", grad[i], fd);
        }
    }

    fn rand_seq_nodes(
        g: &mut Graph,
        rng: &mut ChaCha8Rng,
        d: usize,
        k_pma: usize,
        k_recent: usize,
        transparent: bool,
    ) -> SeqSummaryNodes {
        let gating = if transparent {
            constant_gate(g, d, 1.0, Activation::Identity)
        } else {
            rand_gate(g, rng, d, Activation::Identity)
        };
        SeqSummaryNodes {
            pma_seeds: g.leaf(rand_tensor(rng, k_pma, d)).unwrap(),
            pma_mha: MhaNodes {
                wq: g.leaf(rand_tensor(rng, d, d)).unwrap(),
                wk: g.leaf(rand_tensor(rng, d, d)).unwrap(),
                wv: g.leaf(rand_tensor(rng, d, d)).unwrap(),
                wo: g.leaf(rand_tensor(rng, d, d)).unwrap(),
                heads: 2,
            },
            gating,
            k_recent,
        }
    }

    #[test]
    fn seq_summary_width_is_fixed_by_configuration() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (d, c_cls, t) = (4, 4, 6);
        for valid_count in [0usize, 3, 6] {
            let mut g = Graph::new();
            let s = g.leaf(rand_tensor(&mut rng, d, c_cls + t)).unwrap();
            let nodes = rand_seq_nodes(&mut g, &mut rng, d, 2, 2, false);
            let valid: Vec<bool> = (0..t).map(|i| i >= t - valid_count).collect();
            let out = summarize_seq(&mut g, s, c_cls, &nodes, &valid).unwrap();
            assert_eq!((g.value(out).rows(), g.value(out).cols()), (d, 4 + 2 + 2));
        }
    }

    #[test]
    fn seq_summary_recent_slot_is_the_last_valid_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (d, c_cls, t) = (4, 2, 5);
        let s_val = rand_tensor(&mut rng, d, c_cls + t);
        let mut g = Graph::new();
        let s = g.leaf(s_val.clone()).unwrap();
        let nodes = rand_seq_nodes(&mut g, &mut rng, d, 2, 1, true);
        let out = summarize_seq(&mut g, s, c_cls, &nodes, &vec![true; t]).unwrap();
        // Transparent gating: the last summary column is the last sequence
        // column verbatim.
        let last = g.value(out).cols() - 1;
        for r in 0..d {
            assert_eq!(g.value(out).get(r, last), s_val.get(r, c_cls + t - 1));
        }
        // And the leading block is the CLS columns verbatim.
        for r in 0..d {
            for c in 0..c_cls {
                assert_eq!(g.value(out).get(r, c), s_val.get(r, c));
            }
        }
    }

    #[test]
    fn seq_summary_right_aligns_recent_tokens_and_zero_fills() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (d, c_cls, t) = (4, 1, 5);
        let s_val = rand_tensor(&mut rng, d, c_cls + t);
        let mut g = Graph::new();
        let s = g.leaf(s_val.clone()).unwrap();
        let nodes = rand_seq_nodes(&mut g, &mut rng, d, 1, 3, true);
        // Only sequence positions 3 and 4 are real.
        let valid = vec![false, false, false, true, true];
        let out = summarize_seq(&mut g, s, c_cls, &nodes, &valid).unwrap();
        let base = c_cls + 1; // after CLS and PMA blocks
        for r in 0..d {
            assert_eq!(g.value(out).get(r, base), 0.0, "unfilled slot must be zero");
            assert_eq!(g.value(out).get(r, base + 1), s_val.get(r, c_cls + 3));
            assert_eq!(g.value(out).get(r, base + 2), s_val.get(r, c_cls + 4));
        }
    }

    #[test]
    fn seq_summary_of_all_padding_degrades_to_a_context_summary() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (d, c_cls, t) = (4, 3, 4);
        let s_val = rand_tensor(&mut rng, d, c_cls + t);
        let mut g = Graph::new();
        let s = g.leaf(s_val.clone()).unwrap();
        let nodes = rand_seq_nodes(&mut g, &mut rng, d, 2, 2, true);
        let out = summarize_seq(&mut g, s, c_cls, &nodes, &vec![false; t]).unwrap();

        // Recent slots are all zero.
        for r in 0..d {
            for slot in 0..2 {
                assert_eq!(g.value(out).get(r, c_cls + 2 + slot), 0.0);
            }
        }
        // The pooled block equals pooling over the CLS columns alone.
        let cls = g.slice_cols(s, 0, c_cls).unwrap();
        let cls_tokens = g.transpose(cls).unwrap();
        let pooled = pma(&mut g, nodes.pma_seeds, cls_tokens, &nodes.pma_mha, None).unwrap();
        let pooled_cols = g.transpose(pooled).unwrap();
        for r in 0..d {
            for k in 0..2 {
                let got = g.value(out).get(r, c_cls + k);
                let want = g.value(pooled_cols).get(r, k);
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn seq_summary_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let (d, c_cls, t) = (4, 2, 4);
        let s_val = rand_tensor(&mut rng, d, c_cls + t);
        let valid = vec![false, true, true, true];
        let node_seed = 17;

        let run = |s_data: &[f64]| -> (f64, Option<Vec<f64>>) {
            let mut g = Graph::new();
            let mut nrng = ChaCha8Rng::seed_from_u64(node_seed);
            let s = g
                .leaf(Tensor::new(d, c_cls + t, s_data.to_vec()).unwrap().with_grad())
                .unwrap();
            let nodes = rand_seq_nodes(&mut g, &mut nrng, d, 2, 2, false);
            let out = summarize_seq(&mut g, s, c_cls, &nodes, &valid).unwrap();
            let sq = g.hadamard(out, out).unwrap();
            let loss = g.sum_all(sq).unwrap();
            g.backward(loss).unwrap();
            (g.value(loss).item().unwrap(), g.grad(s).map(|v| v.to_vec()))
        };

        let (_, grad) = run(s_val.data());
        let grad = grad.unwrap();
        let eps = 1e-5;
        for i in 0..s_val.numel() {
            let mut plus = s_val.data().to_vec();
            plus[i] += eps;
            let mut minus = s_val.data().to_vec();
            minus[i] -= eps;
            let fd = (run(&plus).0 - run(&minus).0) / (2.0 * eps);
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-3);
            assert!(rel < 1e-4, "coord {i}: analytic {} vs fd {}", grad[i], fd);
        }
    }
}
