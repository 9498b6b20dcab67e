//! Non-sequence interaction learning.
//!
//! Four pluggable backbones compute feature interactions over a `d x M`
//! embedding matrix (columns are features): pairwise dot products, a
//! factorization machine, stacked deep-cross layers, and an ensemble layer
//! combining dot and cross modules. [`interaction_arch_layer`] wraps any of
//! them with a reshaping MLP so layers stack without changing shape.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::{linear_cols, mlp_cols, LinearNodes, MlpNodes};
use crate::tensor::{Graph, NodeId};

/// Second-order factorization machine score for a single feature vector.
///
/// `x` is `n x 1`, `v` holds one latent row per feature (`n x r`), `w` is
/// `n x 1`, `w0` is `1 x 1`. Returns the scalar
/// `w0 + sum_j w_j x_j + sum_{j<k} <v_j, v_k> x_j x_k`, evaluated in
/// O(n*r) as `0.5 * sum_f [ (sum_j v_jf x_j)^2 - sum_j v_jf^2 x_j^2 ]`.
pub fn fm_second_order(
    g: &mut Graph,
    x: NodeId,
    v: NodeId,
    w: NodeId,
    w0: NodeId,
) -> Result<NodeId> {
    let (xn, vn, wn) = (g.value(x), g.value(v), g.value(w));
    if xn.cols() != 1 || wn.cols() != 1 || wn.rows() != xn.rows() || vn.rows() != xn.rows() {
        return Err(Error::ShapeMismatch {
            op: "fm_second_order",
            lhs_rows: xn.rows(),
            lhs_cols: xn.cols(),
            rhs_rows: vn.rows(),
            rhs_cols: vn.cols(),
        });
    }
    let vt = g.transpose(v)?;
    let mixed = g.matmul(vt, x)?;
    let mixed_sq = g.hadamard(mixed, mixed)?;
    let sum_sq = g.sum_all(mixed_sq)?;

    let v_sq = g.hadamard(v, v)?;
    let x_sq = g.hadamard(x, x)?;
    let vt_sq = g.transpose(v_sq)?;
    let sq_mixed = g.matmul(vt_sq, x_sq)?;
    let sq_sum = g.sum_all(sq_mixed)?;

    let pair_part = g.sub(sum_sq, sq_sum)?;
    let second = g.scale(pair_part, 0.5)?;

    let wt = g.transpose(w)?;
    let linear = g.matmul(wt, x)?;

    let partial = g.add(second, linear)?;
    g.add(partial, w0)
}

/// Flattened upper triangle (diagonal included) of the Gram matrix `X^T X`,
/// as a `M(M+1)/2 x 1` column. Entry order is row-major over the upper
/// triangle: (0,0), (0,1), .., (0,M-1), (1,1), ..
pub fn dot_interaction(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let m = g.value(x).cols();
    let xt = g.transpose(x)?;
    let gram = g.matmul(xt, x)?;
    let mut entries = Vec::with_capacity(m * (m + 1) / 2);
    for i in 0..m {
        for j in i..m {
            entries.push((i, j));
        }
    }
    g.gather_entries(gram, Arc::new(entries))
}

/// Kernel of one deep-cross layer: either a full square matrix or a
/// low-rank factor pair `U (n x r)`, `V (r x n)`.
#[derive(Debug, Clone, Copy)]
pub enum DcnKernel {
    Full(NodeId),
    LowRank { u: NodeId, v: NodeId },
}

/// One cross layer's weights.
#[derive(Debug, Clone, Copy)]
pub struct DcnLayerNodes {
    pub kernel: DcnKernel,
    pub bias: NodeId,
}

/// `x0 .* (W xl + b) + xl` over column vectors. The elementwise product
/// with the base features `x0` is what makes the interaction explicit.
pub fn dcn_cross_layer(g: &mut Graph, x0: NodeId, xl: NodeId, layer: &DcnLayerNodes) -> Result<NodeId> {
    let (t0, tl) = (g.value(x0), g.value(xl));
    if t0.cols() != 1 || tl.cols() != 1 || t0.rows() != tl.rows() {
        return Err(Error::ShapeMismatch {
            op: "dcn_cross_layer",
            lhs_rows: t0.rows(),
            lhs_cols: t0.cols(),
            rhs_rows: tl.rows(),
            rhs_cols: tl.cols(),
        });
    }
    let wx = match layer.kernel {
        DcnKernel::Full(w) => g.matmul(w, xl)?,
        DcnKernel::LowRank { u, v } => {
            let vx = g.matmul(v, xl)?;
            g.matmul(u, vx)?
        }
    };
    let inner = g.add_bias_cols(wx, layer.bias)?;
    let gated = g.hadamard(x0, inner)?;
    g.add(gated, xl)
}

/// Modules an ensemble layer can combine.
#[derive(Debug, Clone)]
pub enum DhenModuleNodes {
    Dot,
    Dcn(DcnLayerNodes),
}

/// One ensemble layer: heterogeneous module outputs concatenated, linearly
/// projected back to the input shape, added to a learned shortcut of the
/// input, then feature-column layer norm.
#[derive(Debug, Clone)]
pub struct DhenLayerNodes {
    pub modules: Vec<DhenModuleNodes>,
    pub projection: LinearNodes,
    pub shortcut: LinearNodes,
    pub norm_gamma: NodeId,
    pub norm_beta: NodeId,
    pub norm_eps: f64,
}

/// `Norm(Ensemble(X) + ShortCut(X))`, shape-preserving on `d x M`.
pub fn dhen_layer(g: &mut Graph, x: NodeId, layer: &DhenLayerNodes) -> Result<NodeId> {
    if layer.modules.is_empty() {
        return Err(Error::config("ensemble layer needs at least one module"));
    }
    let (d, m) = (g.value(x).rows(), g.value(x).cols());
    let flat = g.flatten(x)?;
    let mut outputs = Vec::with_capacity(layer.modules.len());
    for module in &layer.modules {
        let out = match module {
            DhenModuleNodes::Dot => dot_interaction(g, x)?,
            DhenModuleNodes::Dcn(nodes) => dcn_cross_layer(g, flat, flat, nodes)?,
        };
        outputs.push(out);
    }
    let ensemble = g.concat_rows(&outputs)?;
    let projected = linear_cols(g, &layer.projection, ensemble)?;
    let short = linear_cols(g, &layer.shortcut, flat)?;
    let summed = g.add(projected, short)?;
    let matrix = g.reshape(summed, d, m)?;
    // Normalize each feature column over its d entries.
    let tokens = g.transpose(matrix)?;
    let normed = g.layer_norm_rows(tokens, layer.norm_gamma, layer.norm_beta, layer.norm_eps)?;
    g.transpose(normed)
}

/// Backbone selection with per-backbone graph handles.
#[derive(Debug, Clone)]
pub enum BackboneNodes {
    Dot,
    Fm { v: NodeId, w: NodeId, w0: NodeId },
    Dcn(Vec<DcnLayerNodes>),
    Dhen(Vec<DhenLayerNodes>),
}

/// Handles for one interaction layer: a backbone plus the reshaping MLP.
#[derive(Debug, Clone)]
pub struct InteractionLayerNodes {
    pub backbone: BackboneNodes,
    pub out_mlp: MlpNodes,
}

/// Applies the backbone to `[X_l || S_sum_l]` and projects the flattened
/// result back to `d x N`, so stacked layers see a constant shape. Passing
/// `None` for the summary runs the backbone on `X_l` alone.
pub fn interaction_arch_layer(
    g: &mut Graph,
    x_l: NodeId,
    s_sum: Option<NodeId>,
    layer: &InteractionLayerNodes,
) -> Result<NodeId> {
    let (d, n) = (g.value(x_l).rows(), g.value(x_l).cols());
    let joined = match s_sum {
        Some(s) => {
            if g.value(s).rows() != d {
                return Err(Error::ShapeMismatch {
                    op: "interaction_arch_layer",
                    lhs_rows: d,
                    lhs_cols: n,
                    rhs_rows: g.value(s).rows(),
                    rhs_cols: g.value(s).cols(),
                });
            }
            g.concat_cols(&[x_l, s])?
        }
        None => x_l,
    };
    let features = match &layer.backbone {
        BackboneNodes::Dot => dot_interaction(g, joined)?,
        BackboneNodes::Fm { v, w, w0 } => {
            let flat = g.flatten(joined)?;
            fm_second_order(g, flat, *v, *w, *w0)?
        }
        BackboneNodes::Dcn(layers) => {
            let flat = g.flatten(joined)?;
            let mut h = flat;
            for l in layers {
                h = dcn_cross_layer(g, flat, h, l)?;
            }
            h
        }
        BackboneNodes::Dhen(layers) => {
            let mut h = joined;
            for l in layers {
                h = dhen_layer(g, h, l)?;
            }
            g.flatten(h)?
        }
    };
    let projected = mlp_cols(g, &layer.out_mlp, features)?;
    g.reshape(projected, d, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{fan_in_init, mlp_cols};
    use crate::tensor::{Activation, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// O(n^2) pair enumeration, the slow reference the fast identity must
    /// reproduce.
    fn fm_oracle(x: &Tensor, v: &Tensor, w: &Tensor, w0: f64) -> f64 {
        let n = x.rows();
        let r = v.cols();
        let mut acc = w0;
        for j in 0..n {
            acc += w.get(j, 0) * x.get(j, 0);
        }
        for j in 0..n {
            for k in (j + 1)..n {
                let mut dot = 0.0;
                for f in 0..r {
                    dot += v.get(j, f) * v.get(k, f);
                }
                acc += dot * x.get(j, 0) * x.get(k, 0);
            }
        }
        acc
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-2.0..2.0)).unwrap()
    }

    #[test]
    fn fm_with_zero_features_is_the_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(4, 1).unwrap()).unwrap();
        let v = g.leaf(rand_tensor(&mut rng, 4, 3)).unwrap();
        let w = g.leaf(rand_tensor(&mut rng, 4, 1)).unwrap();
        let w0 = g.leaf(Tensor::scalar(0.75).unwrap()).unwrap();
        let out = fm_second_order(&mut g, x, v, w, w0).unwrap();
        assert_eq!(g.value(out).item().unwrap(), 0.75);
    }

    #[test]
    fn fm_with_orthogonal_latents_reduces_to_linear_part() {
        // One-hot latent rows hitting distinct factors are pairwise
        // orthogonal, so only the linear terms survive.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::col_vec(&[1.0, 2.0, -1.0]).unwrap()).unwrap();
        let v = g
            .leaf(Tensor::new(3, 3, vec![2.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 4.0]).unwrap())
            .unwrap();
        let w = g.leaf(Tensor::col_vec(&[0.5, 0.25, 1.0]).unwrap()).unwrap();
        let w0 = g.leaf(Tensor::scalar(1.0).unwrap()).unwrap();
        let out = fm_second_order(&mut g, x, v, w, w0).unwrap();
        let linear = 0.5 * 1.0 + 0.25 * 2.0 + 1.0 * -1.0 + 1.0;
        assert!((g.value(out).item().unwrap() - linear).abs() < 1e-12);
    }

    #[test]
    fn fm_fast_identity_matches_pair_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let n = rng.gen_range(2..9);
            let r = rng.gen_range(1..6);
            let x = rand_tensor(&mut rng, n, 1);
            let v = rand_tensor(&mut rng, n, r);
            let w = rand_tensor(&mut rng, n, 1);
            let w0v = rng.gen_range(-1.0..1.0);
            let mut g = Graph::new();
            let (ix, iv, iw) = (
                g.leaf(x.clone()).unwrap(),
                g.leaf(v.clone()).unwrap(),
                g.leaf(w.clone()).unwrap(),
            );
            let iw0 = g.leaf(Tensor::scalar(w0v).unwrap()).unwrap();
            let out = fm_second_order(&mut g, ix, iv, iw, iw0).unwrap();
            let expect = fm_oracle(&x, &v, &w, w0v);
            assert!(
                (g.value(out).item().unwrap() - expect).abs() < 1e-9,
                "fast {} vs pairs {}",
                g.value(out).item().unwrap(),
                expect
            );
        }
    }

    #[test]
    fn dot_interaction_of_orthonormal_columns_is_identity_gram() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::eye(3).unwrap()).unwrap();
        let out = dot_interaction(&mut g, x).unwrap();
        // Upper triangle of I3 in row-major order.
        assert_eq!(g.value(out).data(), &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn dot_interaction_matches_pairwise_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, 4, 3);
        let mut g = Graph::new();
        let ix = g.leaf(x.clone()).unwrap();
        let out = dot_interaction(&mut g, ix).unwrap();
        assert_eq!(g.value(out).rows(), 3 * 4 / 2);
        let mut k = 0;
        for i in 0..3 {
            for j in i..3 {
                let mut dot = 0.0;
                for r in 0..4 {
                    dot += x.get(r, i) * x.get(r, j);
                }
                assert!((g.value(out).data()[k] - dot).abs() < 1e-12);
                k += 1;
            }
        }
    }

    #[test]
    fn dot_interaction_duplicated_columns_share_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let col = rand_tensor(&mut rng, 4, 1);
        let x = Tensor::from_fn(4, 2, |r, _| col.get(r, 0)).unwrap();
        let mut g = Graph::new();
        let ix = g.leaf(x).unwrap();
        let out = dot_interaction(&mut g, ix).unwrap();
        let d = g.value(out).data();
        // Entries (0,0), (0,1), (1,1) must coincide when the columns do.
        assert!((d[0] - d[1]).abs() < 1e-12);
        assert!((d[0] - d[2]).abs() < 1e-12);
    }

    #[test]
    fn cross_layer_with_zero_weights_is_identity_on_xl() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xl = rand_tensor(&mut rng, 5, 1);
        let mut g = Graph::new();
        let x0 = g.leaf(rand_tensor(&mut rng, 5, 1)).unwrap();
        let ixl = g.leaf(xl.clone()).unwrap();
        let w = g.leaf(Tensor::zeros(5, 5).unwrap()).unwrap();
        let b = g.leaf(Tensor::zeros(5, 1).unwrap()).unwrap();
        let out = dcn_cross_layer(&mut g, x0, ixl, &DcnLayerNodes { kernel: DcnKernel::Full(w), bias: b }).unwrap();
        assert_eq!(g.value(out).data(), xl.data());
    }

    #[test]
    fn cross_layer_with_zero_state_is_gated_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0 = rand_tensor(&mut rng, 4, 1);
        let bias = rand_tensor(&mut rng, 4, 1);
        let mut g = Graph::new();
        let ix0 = g.leaf(x0.clone()).unwrap();
        let ixl = g.leaf(Tensor::zeros(4, 1).unwrap()).unwrap();
        let w = g.leaf(rand_tensor(&mut rng, 4, 4)).unwrap();
        let b = g.leaf(bias.clone()).unwrap();
        let out = dcn_cross_layer(&mut g, ix0, ixl, &DcnLayerNodes { kernel: DcnKernel::Full(w), bias: b }).unwrap();
        for i in 0..4 {
            assert!((g.value(out).get(i, 0) - x0.get(i, 0) * bias.get(i, 0)).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_layer_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (x0, xl) = (rand_tensor(&mut rng, 5, 1), rand_tensor(&mut rng, 5, 1));
        let (w, b) = (rand_tensor(&mut rng, 5, 5), rand_tensor(&mut rng, 5, 1));
        let mut g = Graph::new();
        let (i0, il) = (g.leaf(x0.clone()).unwrap(), g.leaf(xl.clone()).unwrap());
        let (iw, ib) = (g.leaf(w.clone()).unwrap(), g.leaf(b.clone()).unwrap());
        let out = dcn_cross_layer(&mut g, i0, il, &DcnLayerNodes { kernel: DcnKernel::Full(iw), bias: ib }).unwrap();
        for i in 0..5 {
            let mut wx = 0.0;
            for j in 0..5 {
                wx += w.get(i, j) * xl.get(j, 0);
            }
            let expect = x0.get(i, 0) * (wx + b.get(i, 0)) + xl.get(i, 0);
            assert!((g.value(out).get(i, 0) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_layer_low_rank_equals_full_rank_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (x0, xl) = (rand_tensor(&mut rng, 6, 1), rand_tensor(&mut rng, 6, 1));
        let u = rand_tensor(&mut rng, 6, 2);
        let v = rand_tensor(&mut rng, 2, 6);
        // Materialize W = U V for the full-rank path.
        let mut w = Tensor::zeros(6, 6).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let mut acc = 0.0;
                for r in 0..2 {
                    acc += u.get(i, r) * v.get(r, j);
                }
                w.set(i, j, acc);
            }
        }
        let b = rand_tensor(&mut rng, 6, 1);
        let mut g = Graph::new();
        let (i0, il) = (g.leaf(x0).unwrap(), g.leaf(xl).unwrap());
        let (iu, iv, iw, ib) = (
            g.leaf(u).unwrap(),
            g.leaf(v).unwrap(),
            g.leaf(w).unwrap(),
            g.leaf(b).unwrap(),
        );
        let low = dcn_cross_layer(&mut g, i0, il, &DcnLayerNodes { kernel: DcnKernel::LowRank { u: iu, v: iv }, bias: ib }).unwrap();
        let full = dcn_cross_layer(&mut g, i0, il, &DcnLayerNodes { kernel: DcnKernel::Full(iw), bias: ib }).unwrap();
        assert!(g.value(low).max_abs_diff(g.value(full)).unwrap() < 1e-12);
    }

    fn identity_affine(g: &mut Graph, cols: usize) -> (NodeId, NodeId) {
        let gamma = g.leaf(Tensor::full(1, cols, 1.0).unwrap()).unwrap();
        let beta = g.leaf(Tensor::zeros(1, cols).unwrap()).unwrap();
        (gamma, beta)
    }

    #[test]
    fn ensemble_layer_with_zero_shortcut_is_norm_of_projected_module() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (d, m) = (4, 3);
        let x = rand_tensor(&mut rng, d, m);
        let mut g = Graph::new();
        let ix = g.leaf(x).unwrap();
        let proj_w = rand_tensor(&mut rng, d * m, m * (m + 1) / 2);
        let ipw = g.leaf(proj_w).unwrap();
        let ipb = g.leaf(Tensor::zeros(d * m, 1).unwrap()).unwrap();
        let zsw = g.leaf(Tensor::zeros(d * m, d * m).unwrap()).unwrap();
        let zsb = g.leaf(Tensor::zeros(d * m, 1).unwrap()).unwrap();
        let (gamma, beta) = identity_affine(&mut g, d);
        let layer = DhenLayerNodes {
            modules: vec![DhenModuleNodes::Dot],
            projection: LinearNodes { w: ipw, b: ipb },
            shortcut: LinearNodes { w: zsw, b: zsb },
            norm_gamma: gamma,
            norm_beta: beta,
            norm_eps: 1e-12,
        };
        let out = dhen_layer(&mut g, ix, &layer).unwrap();
        // Hand-composed reference: dot -> projection -> reshape -> norm.
        let dot = dot_interaction(&mut g, ix).unwrap();
        let proj = g.matmul(ipw, dot).unwrap();
        let mat = g.reshape(proj, d, m).unwrap();
        let t = g.transpose(mat).unwrap();
        let n = g.layer_norm_rows(t, gamma, beta, 1e-12).unwrap();
        let expect = g.transpose(n).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(expect)).unwrap() < 1e-12);
    }

    #[test]
    fn ensemble_layer_with_zeroed_modules_is_norm_of_shortcut() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (d, m) = (3, 4);
        let x = rand_tensor(&mut rng, d, m);
        let mut g = Graph::new();
        let ix = g.leaf(x).unwrap();
        // Zero projection wipes every module contribution.
        let zp = g.leaf(Tensor::zeros(d * m, m * (m + 1) / 2).unwrap()).unwrap();
        let zpb = g.leaf(Tensor::zeros(d * m, 1).unwrap()).unwrap();
        let sw = g.leaf(rand_tensor(&mut rng, d * m, d * m)).unwrap();
        let sb = g.leaf(rand_tensor(&mut rng, d * m, 1)).unwrap();
        let (gamma, beta) = identity_affine(&mut g, d);
        let layer = DhenLayerNodes {
            modules: vec![DhenModuleNodes::Dot],
            projection: LinearNodes { w: zp, b: zpb },
            shortcut: LinearNodes { w: sw, b: sb },
            norm_gamma: gamma,
            norm_beta: beta,
            norm_eps: 1e-12,
        };
        let out = dhen_layer(&mut g, ix, &layer).unwrap();
        let flat = g.flatten(ix).unwrap();
        let s = linear_cols(&mut g, &LinearNodes { w: sw, b: sb }, flat).unwrap();
        let mat = g.reshape(s, d, m).unwrap();
        let t = g.transpose(mat).unwrap();
        let n = g.layer_norm_rows(t, gamma, beta, 1e-12).unwrap();
        let expect = g.transpose(n).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(expect)).unwrap() < 1e-12);
    }

    #[test]
    fn ensemble_layer_matches_hand_composed_dot_plus_dcn() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (d, m) = (4, 3);
        let flatlen = d * m;
        let utlen = m * (m + 1) / 2;
        let x = rand_tensor(&mut rng, d, m);
        let mut g = Graph::new();
        let ix = g.leaf(x).unwrap();
        let dcn_w = g.leaf(rand_tensor(&mut rng, flatlen, flatlen)).unwrap();
        let dcn_b = g.leaf(rand_tensor(&mut rng, flatlen, 1)).unwrap();
        let pw = g.leaf(rand_tensor(&mut rng, flatlen, utlen + flatlen)).unwrap();
        let pb = g.leaf(rand_tensor(&mut rng, flatlen, 1)).unwrap();
        let sw = g.leaf(rand_tensor(&mut rng, flatlen, flatlen)).unwrap();
        let sb = g.leaf(rand_tensor(&mut rng, flatlen, 1)).unwrap();
        let (gamma, beta) = identity_affine(&mut g, d);
        let dcn_nodes = DcnLayerNodes { kernel: DcnKernel::Full(dcn_w), bias: dcn_b };
        let layer = DhenLayerNodes {
            modules: vec![DhenModuleNodes::Dot, DhenModuleNodes::Dcn(dcn_nodes)],
            projection: LinearNodes { w: pw, b: pb },
            shortcut: LinearNodes { w: sw, b: sb },
            norm_gamma: gamma,
            norm_beta: beta,
            norm_eps: 1e-12,
        };
        let out = dhen_layer(&mut g, ix, &layer).unwrap();

        let dot = dot_interaction(&mut g, ix).unwrap();
        let flat = g.flatten(ix).unwrap();
        let dcn = dcn_cross_layer(&mut g, flat, flat, &dcn_nodes).unwrap();
        let cat = g.concat_rows(&[dot, dcn]).unwrap();
        let proj = linear_cols(&mut g, &LinearNodes { w: pw, b: pb }, cat).unwrap();
        let short = linear_cols(&mut g, &LinearNodes { w: sw, b: sb }, flat).unwrap();
        let sum = g.add(proj, short).unwrap();
        let mat = g.reshape(sum, d, m).unwrap();
        let t = g.transpose(mat).unwrap();
        let n = g.layer_norm_rows(t, gamma, beta, 1e-12).unwrap();
        let expect = g.transpose(n).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(expect)).unwrap() < 1e-12);
    }

    fn toy_layer(
        g: &mut Graph,
        rng: &mut ChaCha8Rng,
        backbone: BackboneNodes,
        feat_len: usize,
        d: usize,
        n: usize,
    ) -> InteractionLayerNodes {
        let hidden = 6;
        let w1 = g.leaf(fan_in_init(rng, hidden, feat_len)).unwrap();
        let b1 = g.leaf(Tensor::zeros(hidden, 1).unwrap()).unwrap();
        let w2 = g.leaf(fan_in_init(rng, d * n, hidden)).unwrap();
        let b2 = g.leaf(Tensor::zeros(d * n, 1).unwrap()).unwrap();
        InteractionLayerNodes {
            backbone,
            out_mlp: MlpNodes {
                layers: vec![LinearNodes { w: w1, b: b1 }, LinearNodes { w: w2, b: b2 }],
                hidden: Activation::Swish,
                output: Activation::Identity,
            },
        }
    }

    #[test]
    fn arch_layer_preserves_shape_for_every_backbone() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (d, n, cs) = (4, 3, 2);
        let m = n + cs;
        for which in 0..3 {
            let mut g = Graph::new();
            let x = g.leaf(rand_tensor(&mut rng, d, n)).unwrap();
            let s = g.leaf(rand_tensor(&mut rng, d, cs)).unwrap();
            let (backbone, feat_len) = match which {
                0 => (BackboneNodes::Dot, m * (m + 1) / 2),
                1 => {
                    let w = g.leaf(rand_tensor(&mut rng, d * m, d * m)).unwrap();
                    let b = g.leaf(Tensor::zeros(d * m, 1).unwrap()).unwrap();
                    (
                        BackboneNodes::Dcn(vec![DcnLayerNodes { kernel: DcnKernel::Full(w), bias: b }]),
                        d * m,
                    )
                }
                _ => {
                    let v = g.leaf(rand_tensor(&mut rng, d * m, 3)).unwrap();
                    let w = g.leaf(rand_tensor(&mut rng, d * m, 1)).unwrap();
                    let w0 = g.leaf(Tensor::scalar(0.1).unwrap()).unwrap();
                    (BackboneNodes::Fm { v, w, w0 }, 1)
                }
            };
            let layer = toy_layer(&mut g, &mut rng, backbone, feat_len, d, n);
            let out = interaction_arch_layer(&mut g, x, Some(s), &layer).unwrap();
            assert_eq!((g.value(out).rows(), g.value(out).cols()), (d, n));
        }
    }

    #[test]
    fn arch_layer_without_summary_runs_backbone_on_x_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (d, n) = (3, 4);
        let mut g = Graph::new();
        let x = g.leaf(rand_tensor(&mut rng, d, n)).unwrap();
        let layer = toy_layer(&mut g, &mut rng, BackboneNodes::Dot, n * (n + 1) / 2, d, n);
        let out = interaction_arch_layer(&mut g, x, None, &layer).unwrap();

        let dot = dot_interaction(&mut g, x).unwrap();
        let proj = mlp_cols(&mut g, &layer.out_mlp, dot).unwrap();
        let expect = g.reshape(proj, d, n).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(expect)).unwrap() == 0.0);
    }

    #[test]
    fn arch_layer_gradients_flow_to_the_summary() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (d, n, cs) = (3, 3, 2);
        let m = n + cs;
        let s_val = rand_tensor(&mut rng, d, cs);
        let x_val = rand_tensor(&mut rng, d, n);
        let w1 = fan_in_init(&mut rng, 5, m * (m + 1) / 2);
        let w2 = fan_in_init(&mut rng, d * n, 5);

        let run = |s_data: &[f64]| -> (f64, Option<Vec<f64>>) {
            let mut g = Graph::new();
            let x = g.leaf(x_val.clone()).unwrap();
            let s = g
                .leaf(Tensor::new(d, cs, s_data.to_vec()).unwrap().with_grad())
                .unwrap();
            let iw1 = g.leaf(w1.clone()).unwrap();
            let ib1 = g.leaf(Tensor::zeros(5, 1).unwrap()).unwrap();
            let iw2 = g.leaf(w2.clone()).unwrap();
            let ib2 = g.leaf(Tensor::zeros(d * n, 1).unwrap()).unwrap();
            let layer = InteractionLayerNodes {
                backbone: BackboneNodes::Dot,
                out_mlp: MlpNodes {
                    layers: vec![
                        LinearNodes { w: iw1, b: ib1 },
                        LinearNodes { w: iw2, b: ib2 },
                    ],
                    hidden: Activation::Swish,
                    output: Activation::Identity,
                },
            };
            let out = interaction_arch_layer(&mut g, x, Some(s), &layer).unwrap();
            let sq = g.hadamard(out, out).unwrap();
            let loss = g.sum_all(sq).unwrap();
            g.backward(loss).unwrap();
            (g.value(loss).item().unwrap(), g.grad(s).map(|v| v.to_vec()))
        };

        let (_, grad) = run(s_val.data());
        let grad = grad.unwrap();
        assert!(grad.iter().any(|&v| v.abs() > 1e-12), "summary must influence output");
        // Central differences on every summary coordinate.
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
