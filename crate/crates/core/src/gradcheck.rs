//! Central finite-difference verification of analytic gradients.
//!
//! Every differentiable operation family has a named scenario that draws
//! random shapes and values from a seeded generator, builds a scalar loss
//! through the operation, and compares each input coordinate's analytic
//! gradient against `(f(x+h) - f(x-h)) / 2h`. A final scenario runs the
//! fully assembled one-layer model end to end over its parameters. The
//! suite is callable from tests and from the command line; the command
//! exits nonzero when any scenario fails.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cross::{self, GatingNodes, NonSeqSummaryNodes, SeqSummaryNodes};
use crate::data::{generate_synthetic, GenConfig};
use crate::error::Result;
use crate::interaction::{
    self, BackboneNodes, DcnKernel, DcnLayerNodes, DhenLayerNodes, DhenModuleNodes,
    InteractionLayerNodes,
};
use crate::model::{Backbone, Mode, ModelConfig, ModelParams};
use crate::nn::{LinearNodes, MlpNodes};
use crate::pipeline::{self, MaskNetNodes};
use crate::sequence::{self, MhaNodes, PffnNodes, RopeSpec, SequenceLayerNodes};
use crate::tensor::{Activation, Graph, NodeId, Tensor};
use crate::train::cross_entropy_node;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Relative error with an absolute floor, so near-zero gradient pairs are
/// compared absolutely instead of blowing up the quotient.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Builder closure: registers nothing itself, just wires the given leaf
/// nodes into a scalar loss.
pub type Builder = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

/// One randomized instance of a scenario: leaf inputs plus the loss
/// construction applied to them.
pub struct ScenarioCase {
    pub inputs: Vec<Tensor>,
    pub build: Builder,
}

pub struct Scenario {
    pub name: &'static str,
    pub gen: fn(&mut ChaCha8Rng) -> Result<ScenarioCase>,
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub outcomes: Vec<CheckOutcome>,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.pass)
    }

    /// One `PASS`/`FAIL` line per scenario.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for o in &self.outcomes {
            out.push_str(&format!(
                "{} {:<32} max_rel_err {:.3e} over {} coordinates\n",
                if o.pass { "PASS" } else { "FAIL" },
                o.name,
                o.max_rel_err,
                o.coords
            ));
        }
        out
    }
}

/// Checks one case: analytic gradients from a single backward pass versus
/// a central difference per input coordinate. Returns the worst relative
/// error and the number of coordinates compared.
pub fn check_case(case: &ScenarioCase, step: f64) -> Result<(f64, usize)> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = case
        .inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_grad()))
        .collect::<Result<_>>()?;
    let loss = (case.build)(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).expect("tracked leaf").to_vec())
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> =
            inputs.iter().map(|t| g.leaf(t.clone())).collect::<Result<_>>()?;
        let out = (case.build)(&mut g, &ids)?;
        g.value(out).item()
    };

    let mut worst = 0.0f64;
    let mut coords = 0;
    let mut perturbed = case.inputs.to_vec();
    for which in 0..case.inputs.len() {
        for j in 0..case.inputs[which].numel() {
            let orig = perturbed[which].data()[j];
            perturbed[which].data_mut()[j] = orig + step;
            let up = eval(&perturbed)?;
            perturbed[which].data_mut()[j] = orig - step;
            let down = eval(&perturbed)?;
            perturbed[which].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(rel_err(analytic[which][j], numeric));
            coords += 1;
        }
    }
    Ok((worst, coords))
}

fn rand_t(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.5..1.5)).unwrap()
}

/// Values bounded away from zero, for kinked functions.
fn rand_t_off_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| {
        let v = rng.gen_range(0.1..1.5);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
    .unwrap()
}

fn rand_dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..5))
}

fn linear_nodes(ids: &[NodeId], w: usize, b: usize) -> LinearNodes {
    LinearNodes { w: ids[w], b: ids[b] }
}

/// Two-layer column MLP over pre-registered weight leaves.
fn mlp_nodes(ids: &[NodeId], first: usize, hidden: Activation, output: Activation) -> MlpNodes {
    MlpNodes {
        layers: vec![
            LinearNodes { w: ids[first], b: ids[first + 1] },
            LinearNodes { w: ids[first + 2], b: ids[first + 3] },
        ],
        hidden,
        output,
    }
}

fn case_matmul_chain(rng: &mut ChaCha8Rng) -> Result<ScenarioCase> {
    let (m, k) = rand_dims(rng);
    let n = rng.gen_range(1..5);
    let inputs = vec![rand_t(rng, m, k), rand_t(rng, k, n), rand_t(rng, m, n)];
    Ok(ScenarioCase {
        inputs,
        build: Box::new(|g, ids| {
            let prod = g.matmul(ids[0], ids[1])?;
            let mixed = g.hadamard(prod, ids[2])?;
            g.sum_all(mixed)
        }),
    })
}

fn case_add_sub_scale(rng: &mut ChaCha8Rng) -> Result<ScenarioCase> {
    let (m, n) = rand_dims(rng);
    let inputs = vec![rand_t(rng, m, n), rand_t(rng, m, n), rand_t(rng, m, n)];
    Ok(ScenarioCase {
        inputs,
        build: Box::new(|g, ids| {
            let s = g.add(ids[0], ids[1])?;
            let d = g.sub(s, ids[2])?;
            let scaled = g.scale(d, -1.7)?;
            let sq = g.hadamard(scaled, scaled)?;
            g.sum_all(sq)
        }),
    })
}

fn case_bias_columns(rng: &mut ChaCha8Rng) -> Result<ScenarioCase> {
    let (m, n) = rand_dims(rng);
    let inputs = vec![rand_t(rng, m, n), rand_t(rng, m, 1)];
    Ok(ScenarioCase {
        inputs,
        build: Box::new(|g, ids| {
            let y = g.add_bias_cols(ids[0], ids[1])?;
            let sq = g.hadamard(y, y)?;
            g.sum_all(sq)
        }),
    })
}

fn case_smooth_activations(rng: &mut ChaCha8Rng) -> Result<ScenarioCase> {
    let (m, n) = rand_dims(rng);
    let inputs = vec![rand_t(rng, m, n)];
    Ok(ScenarioCase {
        inputs,
        build: Box::new(|g, ids| {
            let a = g.activation(ids[0], Activation::Tanh)?;
            let b = g.activation(a, Activation::Swish)?;
            let c = g.activation(b, Activation::Sigmoid)?;
            g.sum_all(c)
        }),
    })
}

fn case_relu_off_kink(rng: &mut ChaCha8Rng) -> Result<ScenarioCase> {
    let (m, n) = rand_dims(rng);
    let inputs = vec![rand_t_off_zero(rng, m, n)];
    Ok(ScenarioCase {
        inputs,
        build: Box::new(|g, ids| {
            let a = g.activation(ids[0], Activation::Relu)?;
            g.sum_all(a)
        }),
    })
}

fn case_ln_positive(rng: &mut ChaCha8Rng) -> Result<ScenarioCase> {
    let (m, n) = rand_dims(rng);
    let inputs = vec![Tensor::from_fn(m, n, |_, _| rng.gen_range(0.3..3.0)).unwrap()];
    Ok(ScenarioCase {
        inputs,
        build: Box::new(|g, ids| {
            let a = g.ln(ids[0])?;
            g.sum_all(a)
        }),
    })
}

fn case_clamp_inside_and_outside(rng: &mut ChaCha8Rng) -> Result<ScenarioCase> {
    // Half the entries sit strictly inside [-1, 1], half clearly outside;
    // none near the boundary where central differences straddle the edge.
    let (m, n) = rand_dims(rng);
    let inputs = vec![Tensor::from_fn(m, n, |_, _| {
        if rng.gen_bool(0.5) {
            rng.gen_range(-0.8..0.8)
        } else {
            let v = rng.gen_range(1.2..2.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        }
    })
    .unwrap()];
    Ok(ScenarioCase {
        inputs,
        build: Box::new(|g, ids| {
            let c = g.clamp(ids[0], -1.0, 1.0)?;
            let sq = g.hadamard(c, c)?;
            g.sum_all(sq)
        }),
    })
}

fn case_softmax_rows(rng: &mut ChaCha8Rng) -> Result<ScenarioCase> {
    let (m, n) = (rng.gen_range(1..4), rng.gen_range(2..5));
    let inputs = vec![rand_t(rng, m, n), rand_t(rng, m, n)];
    Ok(ScenarioCase {
        inputs,
        build: Box::new(|g, ids| {
            let s = g.softmax_rows(ids[0])?;
            let mixed = g.hadamard(s, ids[1])?;
            g.sum_all(mixed)
        }),
    })
}

fn case_masked_softmax_rows(rng: &mut ChaCha8Rng) -> Result<ScenarioCase> {
    let (m, n) = (rng.gen_range(1..4), rng.gen_range(2..5));
    let mut valid: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();
    valid[rng.gen_range(0..n)] = true;
    let valid = Arc::new(valid);
    let inputs = vec![rand_t(rng, m, n), rand_t(rng, m, n)];
    Ok(ScenarioCase {
        inputs,
        build: Box::new(move |g, ids| {
            let s = g.masked_softmax_rows(ids[0], Arc::clone(&valid))?;
            let mixed = g.hadamard(s, ids[1])?;
            g.sum_all(mixed)
        }),
    })
}

fn case_layer_norm_rows(rng: &mut ChaCha8Rng) -> Result<ScenarioCase> {
    let (m, n) = (rng.gen_range(1..4), rng.gen_range(2..5));
    let inputs = vec![rand_t(rng, m, n), rand_t(rng, 1, n), rand_t(rng, 1, n), rand_t(rng, m, n)];
    Ok(ScenarioCase {
        inputs,
        build: Box::new(|g, ids| {
            let normed = g.layer_norm_rows(ids[0], ids[1], ids[2], 1e-6)?;
            let mixed = g.hadamard(normed, ids[3])?;
            g.sum_all(mixed)
        }),
    })
}

fn case_rope_rotation(rng: &mut ChaCha8Rng) -> Result<ScenarioCase> {
    let tokens = rng.gen_range(1..5);
    let d = 2 * rng.gen_range(1..4);
    let positions = Arc::new((0..tokens).map(|_| rng.gen_range(0..12)).collect::<Vec<_>>());
    let inputs = vec![rand_t(rng, tokens, d), rand_t(rng, tokens, d)];
    Ok(ScenarioCase {
        inputs,
        build: Box::new(move |g, ids| {
            let rotated = g.rope(ids[0], Arc::clone(&positions), 100.0)?;
            let mixed = g.hadamard(rotated, ids[1])?;
            g.sum_all(mixed)
        }),
    })
}

fn case_structural_moves(rng: &mut ChaCha8Rng) -> Result<ScenarioCase> {
    let (m, n) = (rng.gen_range(1..4), rng.gen_range(1..4));
    let inputs = vec![rand_t(rng, m, n), rand_t(rng, n * m, 1)];
    Ok(ScenarioCase {
        inputs,
        build: Box::new(move |g, ids| {
            let t = g.transpose(ids[0])?;
            let r = g.reshape(t, 1, m * n)?;
            let f = g.flatten(r)?;
            let mixed = g.hadamard(f, ids[1])?;
            g.sum_all(mixed)
        }),
    })
}

fn case_concat_and_slice(rng: &mut ChaCha8Rng) -> Result<ScenarioCase> {
    let m = rng.gen_range(1..4);
    let (a, b) = (rng.gen_range(1..4), rng.gen_range(1..4));
    let inputs = vec![rand_t(rng, m, a), rand_t(rng, m, b)];
    Ok(ScenarioCase {
        inputs,
        build: Box::new(move |g, ids| {
            let wide = g.concat_cols(&[ids[0], ids[1], ids[0]])?;
            let stacked = g.concat_rows(&[wide, wide])?;
            let cut = g.slice_cols(stacked, a / 2, a + b)?;
            let sq = g.hadamard(cut, cut)?;
            g.sum_all(sq)
        }),
    })
}

fn case_gathers(rng: &mut ChaCha8Rng) -> Result<ScenarioCase> {
    let (rows, cols) = (rng.gen_range(2..6), rng.gen_range(2..5));
    let take = rng.gen_range(1..5);
    let picks = Arc::new((0..take).map(|_| rng.gen_range(0..rows)).collect::<Vec<_>>());
    let entries = Arc::new(
        (0..take)
            .map(|_| (rng.gen_range(0..rows), rng.gen_range(0..cols)))
            .collect::<Vec<_>>(),
    );
    let inputs = vec![rand_t(rng, rows, cols), rand_t(rng, take, cols)];
    Ok(ScenarioCase {
        inputs,
        build: Box::new(move |g, ids| {
            let picked = g.gather_rows(ids[0], Arc::clone(&picks))?;
            let mixed = g.hadamard(picked, ids[1])?;
            let partial = g.sum_all(mixed)?;
            let singles = g.gather_entries(ids[0], Arc::clone(&entries))?;
            let s2 = g.sum_all(singles)?;
            g.add(partial, s2)
        }),
    })
}

fn case_dot_backbone(rng: &mut ChaCha8Rng) -> Result<ScenarioCase> {
    let (d, m) = (rng.gen_range(2..5), rng.gen_range(2..5));
    let inputs = vec![rand_t(rng, d, m), rand_t(rng, m * (m + 1) / 2, 1)];
    Ok(ScenarioCase {
        inputs,
        build: Box::new(|g, ids| {
            let pairs = interaction::dot_interaction(g, ids[0])?;
            let mixed = g.hadamard(pairs, ids[1])?;
            g.sum_all(mixed)
        }),
    })
}

fn case_fm_backbone(rng: &mut ChaCha8Rng) -> Result<ScenarioCase> {
    let (n, r) = (rng.gen_range(2..7), rng.gen_range(1..4));
    let inputs = vec![
        rand_t(rng, n, 1),
        rand_t(rng, n, r),
        rand_t(rng, n, 1),
        rand_t(rng, 1, 1),
    ];
    Ok(ScenarioCase {
        inputs,
        build: Box::new(|g, ids| interaction::fm_second_order(g, ids[0], ids[1], ids[2], ids[3])),
    })
}

fn case_dcn_layers(rng: &mut ChaCha8Rng) -> Result<ScenarioCase> {
    let n = rng.gen_range(2..6);
    let r = rng.gen_range(1..3);
    let inputs = vec![
        rand_t(rng, n, 1),
        rand_t(rng, n, n),
        rand_t(rng, n, 1),
        rand_t(rng, n, r),
        rand_t(rng, r, n),
        rand_t(rng, n, 1),
    ];
    Ok(ScenarioCase {
        inputs,
        build: Box::new(|g, ids| {
            let full = DcnLayerNodes { kernel: DcnKernel::Full(ids[1]), bias: ids[2] };
            let low = DcnLayerNodes {
                kernel: DcnKernel::LowRank { u: ids[3], v: ids[4] },
                bias: ids[5],
            };
            let x1 = interaction::dcn_cross_layer(g, ids[0], ids[0], &full)?;
            let x2 = interaction::dcn_cross_layer(g, ids[0], x1, &low)?;
            let sq = g.hadamard(x2, x2)?;
            g.sum_all(sq)
        }),
    })
}

fn case_dhen_layer(rng: &mut ChaCha8Rng) -> Result<ScenarioCase> {
    let (d, m) = (2, 3);
    let flat = d * m;
    let ut = m * (m + 1) / 2;
    let inputs = vec![
        rand_t(rng, d, m),             // x
        rand_t(rng, flat, flat),       // dcn kernel
        rand_t(rng, flat, 1),          // dcn bias
        rand_t(rng, flat, ut + flat),  // projection w
        rand_t(rng, flat, 1),          // projection b
        rand_t(rng, flat, flat),       // shortcut w
        rand_t(rng, flat, 1),          // shortcut b
        rand_t(rng, 1, d),             // gamma
        rand_t(rng, 1, d),             // beta
        rand_t(rng, d, m),             // mixer
    ];
    Ok(ScenarioCase {
        inputs,
        build: Box::new(move |g, ids| {
            let layer = DhenLayerNodes {
                modules: vec![
                    DhenModuleNodes::Dot,
                    DhenModuleNodes::Dcn(DcnLayerNodes {
                        kernel: DcnKernel::Full(ids[1]),
                        bias: ids[2],
                    }),
                ],
                projection: linear_nodes(ids, 3, 4),
                shortcut: linear_nodes(ids, 5, 6),
                norm_gamma: ids[7],
                norm_beta: ids[8],
                norm_eps: 1e-6,
            };
            let y = interaction::dhen_layer(g, ids[0], &layer)?;
            let mixed = g.hadamard(y, ids[9])?;
            g.sum_all(mixed)
        }),
    })
}

fn case_multi_head_attention(rng: &mut ChaCha8Rng) -> Result<ScenarioCase> {
    // Rope shares one positions vector between queries and keys, so this
    // scenario exercises the self-attention shape the model actually uses.
    let heads = 2;
    let d = 4;
    let t = rng.gen_range(2..5);
    let mut valid: Vec<bool> = (0..t).map(|_| rng.gen_bool(0.7)).collect();
    valid[rng.gen_range(0..t)] = true;
    let valid = Arc::new(valid);
    let positions = Arc::new((0..t).map(|_| rng.gen_range(0..12)).collect::<Vec<_>>());
    let inputs = vec![
        rand_t(rng, t, d),
        rand_t(rng, t, d),
        rand_t(rng, d, d),
        rand_t(rng, d, d),
        rand_t(rng, d, d),
        rand_t(rng, d, d),
        rand_t(rng, t, d),
    ];
    Ok(ScenarioCase {
        inputs,
        build: Box::new(move |g, ids| {
            let mha = MhaNodes { wq: ids[2], wk: ids[3], wv: ids[4], wo: ids[5], heads };
            let rope = RopeSpec { positions: Arc::clone(&positions), base: 50.0 };
            let out = sequence::multi_head_attention(
                g,
                ids[0],
                ids[1],
                &mha,
                Some(&rope),
                Some(&valid),
            )?;
            let mixed = g.hadamard(out, ids[6])?;
            g.sum_all(mixed)
        }),
    })
}

fn case_pooled_attention(rng: &mut ChaCha8Rng) -> Result<ScenarioCase> {
    let heads = 2;
    let d = 4;
    let (k, t) = (rng.gen_range(1..3), rng.gen_range(2..5));
    let inputs = vec![
        rand_t(rng, k, d),
        rand_t(rng, t, d),
        rand_t(rng, d, d),
        rand_t(rng, d, d),
        rand_t(rng, d, d),
        rand_t(rng, d, d),
        rand_t(rng, k, d),
    ];
    Ok(ScenarioCase {
        inputs,
        build: Box::new(move |g, ids| {
            let mha = MhaNodes { wq: ids[2], wk: ids[3], wv: ids[4], wo: ids[5], heads };
            let out = sequence::pma(g, ids[0], ids[1], &mha, None)?;
            let mixed = g.hadamard(out, ids[6])?;
            g.sum_all(mixed)
        }),
    })
}

fn case_conditioned_feature_map(rng: &mut ChaCha8Rng) -> Result<ScenarioCase> {
    let d = 3;
    let n_sum = 2;
    let t = rng.gen_range(2..5);
    let hidden = 4;
    let inputs = vec![
        rand_t(rng, d, n_sum),
        rand_t(rng, d, t),
        rand_t(rng, hidden, d * n_sum),
        rand_t(rng, hidden, 1),
        rand_t(rng, d * d, hidden),
        rand_t(rng, d * d, 1),
        rand_t(rng, d, t),
    ];
    Ok(ScenarioCase {
        inputs,
        build: Box::new(move |g, ids| {
            let nodes = PffnNodes {
                mlp: mlp_nodes(ids, 2, Activation::Swish, Activation::Identity),
            };
            let p = sequence::pffn(g, ids[0], ids[1], &nodes)?;
            let mixed = g.hadamard(p, ids[6])?;
            g.sum_all(mixed)
        }),
    })
}

fn case_sequence_layer(rng: &mut ChaCha8Rng) -> Result<ScenarioCase> {
    let d = 4;
    let n_sum = 2;
    let t = rng.gen_range(2..5);
    let hidden = 3;
    let positions = Arc::new((0..t).collect::<Vec<_>>());
    let mut valid: Vec<bool> = (0..t).map(|_| rng.gen_bool(0.7)).collect();
    valid[0] = true;
    let valid = Arc::new(valid);
    let inputs = vec![
        rand_t(rng, d, t),
        rand_t(rng, d, n_sum),
        rand_t(rng, hidden, d * n_sum),
        rand_t(rng, hidden, 1),
        rand_t(rng, d * d, hidden),
        rand_t(rng, d * d, 1),
        rand_t(rng, d, d),
        rand_t(rng, d, d),
        rand_t(rng, d, d),
        rand_t(rng, d, d),
        rand_t(rng, 1, d),
        rand_t(rng, 1, d),
        rand_t(rng, d, t),
    ];
    Ok(ScenarioCase {
        inputs,
        build: Box::new(move |g, ids| {
            let nodes = SequenceLayerNodes {
                pffn: PffnNodes {
                    mlp: mlp_nodes(ids, 2, Activation::Swish, Activation::Identity),
                },
                mha: MhaNodes { wq: ids[6], wk: ids[7], wv: ids[8], wo: ids[9], heads: 2 },
                ln_gamma: ids[10],
                ln_beta: ids[11],
                ln_eps: 1e-6,
            };
            let rope = RopeSpec { positions: Arc::clone(&positions), base: 80.0 };
            let s_next = sequence::sequence_arch_layer(
                g,
                ids[0],
                ids[1],
                &nodes,
                Some(&rope),
                Some(&valid),
            )?;
            let mixed = g.hadamard(s_next, ids[12])?;
            g.sum_all(mixed)
        }),
    })
}

fn case_mask_net(rng: &mut ChaCha8Rng) -> Result<ScenarioCase> {
    let d = 3;
    let k = rng.gen_range(1..3);
    let t = rng.gen_range(2..4);
    let kd = k * d;
    let hidden = 4;
    let mut inputs: Vec<Tensor> = (0..k).map(|_| rand_t(rng, d, t)).collect();
    inputs.push(rand_t(rng, hidden, kd));
    inputs.push(rand_t(rng, hidden, 1));
    inputs.push(rand_t(rng, kd, hidden));
    inputs.push(rand_t(rng, kd, 1));
    inputs.push(rand_t(rng, d, kd));
    inputs.push(rand_t(rng, d, 1));
    inputs.push(rand_t(rng, d, t));
    Ok(ScenarioCase {
        inputs,
        build: Box::new(move |g, ids| {
            let nodes = MaskNetNodes {
                mask_mlp: mlp_nodes(ids, k, Activation::Swish, Activation::Sigmoid),
                combine: linear_nodes(ids, k + 4, k + 5),
            };
            let s = pipeline::mask_net(g, &ids[..k], &nodes)?;
            let mixed = g.hadamard(s, ids[k + 6])?;
            g.sum_all(mixed)
        }),
    })
}

fn case_nonseq_summary(rng: &mut ChaCha8Rng) -> Result<ScenarioCase> {
    let d = 3;
    let n = rng.gen_range(3..6);
    let n_sum = rng.gen_range(1..3);
    let hidden = 3;
    let inputs = vec![
        rand_t(rng, d, n),
        rand_t(rng, n, n_sum),
        rand_t(rng, hidden, d),
        rand_t(rng, hidden, 1),
        rand_t(rng, d, hidden),
        rand_t(rng, d, 1),
        rand_t(rng, d, n_sum),
    ];
    Ok(ScenarioCase {
        inputs,
        build: Box::new(move |g, ids| {
            let nodes = NonSeqSummaryNodes {
                lce_w: ids[1],
                gating: GatingNodes {
                    mlp: mlp_nodes(ids, 2, Activation::Swish, Activation::Identity),
                    sigma: Activation::Tanh,
                },
            };
            let summary = cross::summarize_nonseq(g, ids[0], &nodes)?;
            let mixed = g.hadamard(summary, ids[6])?;
            g.sum_all(mixed)
        }),
    })
}

fn case_seq_summary(rng: &mut ChaCha8Rng) -> Result<ScenarioCase> {
    let d = 4;
    let c_cls = 2;
    let t = rng.gen_range(2..5);
    let k_pma = 1;
    let k_recent = 2;
    let hidden = 3;
    let mut valid: Vec<bool> = (0..t).map(|_| rng.gen_bool(0.7)).collect();
    valid[rng.gen_range(0..t)] = true;
    let valid_for_build = valid.clone();
    let width = c_cls + k_pma + k_recent;
    let inputs = vec![
        rand_t(rng, d, c_cls + t),
        rand_t(rng, k_pma, d),
        rand_t(rng, d, d),
        rand_t(rng, d, d),
        rand_t(rng, d, d),
        rand_t(rng, d, d),
        rand_t(rng, hidden, d),
        rand_t(rng, hidden, 1),
        rand_t(rng, d, hidden),
        rand_t(rng, d, 1),
        rand_t(rng, d, width),
    ];
    Ok(ScenarioCase {
        inputs,
        build: Box::new(move |g, ids| {
            let nodes = SeqSummaryNodes {
                pma_seeds: ids[1],
                pma_mha: MhaNodes { wq: ids[2], wk: ids[3], wv: ids[4], wo: ids[5], heads: 2 },
                gating: GatingNodes {
                    mlp: mlp_nodes(ids, 6, Activation::Swish, Activation::Identity),
                    sigma: Activation::Identity,
                },
                k_recent,
            };
            let summary = cross::summarize_seq(g, ids[0], c_cls, &nodes, &valid_for_build)?;
            let mixed = g.hadamard(summary, ids[10])?;
            g.sum_all(mixed)
        }),
    })
}

fn case_interaction_layer(rng: &mut ChaCha8Rng) -> Result<ScenarioCase> {
    let d = 3;
    let n = 3;
    let s_cols = 2;
    let m = n + s_cols;
    let feat = m * (m + 1) / 2;
    let hidden = 4;
    let inputs = vec![
        rand_t(rng, d, n),
        rand_t(rng, d, s_cols),
        rand_t(rng, hidden, feat),
        rand_t(rng, hidden, 1),
        rand_t(rng, d * n, hidden),
        rand_t(rng, d * n, 1),
        rand_t(rng, d, n),
    ];
    Ok(ScenarioCase {
        inputs,
        build: Box::new(move |g, ids| {
            let layer = InteractionLayerNodes {
                backbone: BackboneNodes::Dot,
                out_mlp: mlp_nodes(ids, 2, Activation::Swish, Activation::Identity),
            };
            let x_next = interaction::interaction_arch_layer(g, ids[0], Some(ids[1]), &layer)?;
            let mixed = g.hadamard(x_next, ids[6])?;
            g.sum_all(mixed)
        }),
    })
}

/// Registry of per-operation scenarios. The end-to-end model check runs
/// separately because its inputs live in a parameter store, not a flat
/// leaf list.
pub fn scenarios() -> Vec<Scenario> {
    vec![
        Scenario { name: "matmul_chain", gen: case_matmul_chain },
        Scenario { name: "add_sub_scale", gen: case_add_sub_scale },
        Scenario { name: "bias_columns", gen: case_bias_columns },
        Scenario { name: "smooth_activations", gen: case_smooth_activations },
        Scenario { name: "relu_off_kink", gen: case_relu_off_kink },
        Scenario { name: "ln_positive", gen: case_ln_positive },
        Scenario { name: "clamp_inside_and_outside", gen: case_clamp_inside_and_outside },
        Scenario { name: "softmax_rows", gen: case_softmax_rows },
        Scenario { name: "masked_softmax_rows", gen: case_masked_softmax_rows },
        Scenario { name: "layer_norm_rows", gen: case_layer_norm_rows },
        Scenario { name: "rope_rotation", gen: case_rope_rotation },
        Scenario { name: "structural_moves", gen: case_structural_moves },
        Scenario { name: "concat_and_slice", gen: case_concat_and_slice },
        Scenario { name: "gathers", gen: case_gathers },
        Scenario { name: "dot_backbone", gen: case_dot_backbone },
        Scenario { name: "fm_backbone", gen: case_fm_backbone },
        Scenario { name: "dcn_layers", gen: case_dcn_layers },
        Scenario { name: "dhen_layer", gen: case_dhen_layer },
        Scenario { name: "multi_head_attention", gen: case_multi_head_attention },
        Scenario { name: "pooled_attention", gen: case_pooled_attention },
        Scenario { name: "conditioned_feature_map", gen: case_conditioned_feature_map },
        Scenario { name: "sequence_layer", gen: case_sequence_layer },
        Scenario { name: "mask_net", gen: case_mask_net },
        Scenario { name: "nonseq_summary", gen: case_nonseq_summary },
        Scenario { name: "seq_summary", gen: case_seq_summary },
        Scenario { name: "interaction_layer", gen: case_interaction_layer },
    ]
}

fn tiny_model(seed: u64) -> Result<(ModelParams, crate::data::RawExample)> {
    let gen = GenConfig {
        num_examples: 4,
        num_users: 2,
        dense_count: 2,
        sparse_vocabs: vec![5, 3],
        seq_count: 1,
        max_seq_len: 3,
        embedding_dim: 4,
        ..GenConfig::default()
    };
    let config = ModelConfig {
        layers: 1,
        heads: 2,
        backbone: Backbone::Dhen,
        mode: Mode::Int,
        c_cls: 1,
        n_sum: 1,
        k_pma: 1,
        k_recent: 1,
        head_hidden: vec![4],
        interaction_hidden: 3,
        pffn_hidden: 2,
        mask_hidden: 2,
        gate_hidden: 2,
        dcn_rank: 0,
        ..ModelConfig::default()
    };
    let ds = generate_synthetic(&gen, seed)?;
    let pick = (seed as usize) % ds.examples.len();
    let params = ModelParams::new(config, ds.schema.clone(), seed ^ 0xA5)?;
    Ok((params, ds.examples[pick].clone()))
}

/// End-to-end check: loss gradients of the assembled one-layer model over
/// a random subset of coordinates of every parameter tensor.
pub fn check_end_to_end(seed: u64, step: f64, coords_per_tensor: usize) -> Result<(f64, usize)> {
    let (params, ex) = tiny_model(seed)?;
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let fp = params.forward(&mut g, &b, &ex)?;
    let loss = cross_entropy_node(&mut g, fp.prob, ex.label)?;
    g.backward(loss)?;
    let mut grads = params.set.zero_grads();
    b.accumulate_grads(&g, &mut grads);

    let loss_at = |p: &ModelParams| -> Result<f64> {
        let prob = p.predict(&ex)?;
        crate::train::cross_entropy(prob, ex.label)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(7));
    let mut worst = 0.0f64;
    let mut coords = 0;
    let mut probe = params.clone();
    for (idx, (_, tensor)) in params.set.iter().enumerate() {
        let numel = tensor.numel();
        let picks: Vec<usize> = if numel <= coords_per_tensor {
            (0..numel).collect()
        } else {
            (0..coords_per_tensor).map(|_| rng.gen_range(0..numel)).collect()
        };
        for j in picks {
            let orig = tensor.data()[j];
            let mut shifted = tensor.clone();
            shifted.data_mut()[j] = orig + step;
            probe.set.replace(idx, shifted.clone());
            let up = loss_at(&probe)?;
            shifted.data_mut()[j] = orig - step;
            probe.set.replace(idx, shifted);
            let down = loss_at(&probe)?;
            probe.set.replace(idx, tensor.clone());
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(rel_err(grads[idx][j], numeric));
            coords += 1;
        }
    }
    Ok((worst, coords))
}

/// Runs every scenario over `seeds` random draws plus the end-to-end
/// model check, comparing against `tolerance`.
pub fn run_suite(seeds: u64, step: f64, tolerance: f64) -> Result<SuiteReport> {
    let mut outcomes = Vec::new();
    for (i, scenario) in scenarios().into_iter().enumerate() {
        let mut worst = 0.0f64;
        let mut coords = 0;
        for s in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(s ^ ((i as u64 + 1) << 32));
            let case = (scenario.gen)(&mut rng)?;
            let (w, c) = check_case(&case, step)?;
            worst = worst.max(w);
            coords += c;
        }
        outcomes.push(CheckOutcome {
            name: scenario.name.to_string(),
            coords,
            max_rel_err: worst,
            pass: worst < tolerance,
        });
    }

    let mut worst = 0.0f64;
    let mut coords = 0;
    for s in 0..seeds {
        let (w, c) = check_end_to_end(s, step, 6)?;
        worst = worst.max(w);
        coords += c;
    }
    outcomes.push(CheckOutcome {
        name: "end_to_end_one_layer_model".to_string(),
        coords,
        max_rel_err: worst,
        pass: worst < tolerance,
    });

    Ok(SuiteReport { outcomes, tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_default_settings() {
        let report = run_suite(3, DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap();
        assert!(report.all_passed(), "\n{}", report.render());
        assert_eq!(report.outcomes.len(), scenarios().len() + 1);
    }

    #[test]
    fn scenario_names_are_unique() {
        let mut names: Vec<&str> = scenarios().iter().map(|s| s.name).collect();
        let before = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(before, names.len());
    }

    #[test]
    fn comparator_flags_a_wrong_gradient() {
        // Relu exactly at its kink: the analytic convention (zero) and the
        // central difference (one half) legitimately disagree, which is
        // precisely what the comparator must catch.
        let case = ScenarioCase {
            inputs: vec![Tensor::new(1, 1, vec![0.0]).unwrap()],
            build: Box::new(|g, ids| {
                let r = g.activation(ids[0], crate::tensor::Activation::Relu)?;
                g.sum_all(r)
            }),
        };
        let (worst, coords) = check_case(&case, DEFAULT_STEP).unwrap();
        assert_eq!(coords, 1);
        assert!(worst > DEFAULT_TOLERANCE);
    }

    #[test]
    fn end_to_end_check_covers_every_parameter_tensor() {
        let (params, _) = tiny_model(0).unwrap();
        let (_, coords) = check_end_to_end(0, DEFAULT_STEP, 2).unwrap();
        assert!(coords >= 2 * params.set.len() - params.set.len());
    }

    #[test]
    fn report_renders_one_line_per_scenario() {
        let report = run_suite(1, DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap();
        let text = report.render();
        assert_eq!(text.lines().count(), report.outcomes.len());
        assert!(text.lines().all(|l| l.starts_with("PASS") || l.starts_with("FAIL")));
    }
}
