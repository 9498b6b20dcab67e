//! Full model assembly: configuration, parameter layout, and the forward
//! pass interleaving the interaction and sequence arches with summary
//! exchange.
//!
//! The per-layer loop computes both side's summaries, feeds the sequence
//! summary into the interaction arch and the non-sequence summary into the
//! sequence arch, then advances both sides. A final summary pair feeds the
//! prediction head. The `mode` setting controls which in-loop exchange
//! directions carry real values; disabled directions receive zeros of the
//! same shape so downstream weights keep identical dimensions.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cross::{
    self, GatingNodes, NonSeqSummaryNodes, SeqSummaryNodes,
};
use crate::data::{FeatureSchema, RawExample};
use crate::error::{Error, Result};
use crate::interaction::{
    self, BackboneNodes, DcnKernel, DcnLayerNodes, DhenLayerNodes, DhenModuleNodes,
    InteractionLayerNodes,
};
use crate::nn::{
    uniform_init, Bound, LinearIds, LinearInit, MlpIds, MlpNodes, ParamBuilder, ParamId, ParamSet,
};
use crate::pipeline::{self, EmbedNodes, MaskNetNodes};
use crate::sequence::{self, MhaNodes, PffnNodes, RopeSpec, SequenceLayerNodes};
use crate::tensor::{Activation, Graph, NodeId, Tensor};

/// Interaction backbone selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Dot,
    Fm,
    Dcn,
    Dhen,
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Backbone::Dot => "dot",
            Backbone::Fm => "fm",
            Backbone::Dcn => "dcn",
            Backbone::Dhen => "dhen",
        };
        f.write_str(s)
    }
}

impl FromStr for Backbone {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(Backbone::Dot),
            "fm" => Ok(Backbone::Fm),
            "dcn" => Ok(Backbone::Dcn),
            "dhen" => Ok(Backbone::Dhen),
            other => Err(Error::config(format!("unknown backbone '{other}'"))),
        }
    }
}

/// Which summary directions carry real values during the layer loop.
///
/// * `sole`: no sequence arch at all; the sequence is mean-pooled into one
///   extra non-sequence column up front.
/// * `sep`: both arches run, but each receives zeros from the other.
/// * `n2s`: only the non-sequence summary crosses over (into CLS and the
///   sequence conditioning network).
/// * `s2n`: only the sequence summary crosses over (into the interaction
///   backbone input).
/// * `int`: both directions are live.
///
/// The final head always fuses both terminal summaries (zeros standing in
/// for the sequence side under `sole`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sole,
    Sep,
    N2s,
    S2n,
    Int,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Sole, Mode::Sep, Mode::N2s, Mode::S2n, Mode::Int];

    fn seq_receives_nonseq(self) -> bool {
        matches!(self, Mode::N2s | Mode::Int)
    }

    fn nonseq_receives_seq(self) -> bool {
        matches!(self, Mode::S2n | Mode::Int)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::Sole => "sole",
            Mode::Sep => "sep",
            Mode::N2s => "n2s",
            Mode::S2n => "s2n",
            Mode::Int => "int",
        };
        f.write_str(s)
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sole" => Ok(Mode::Sole),
            "sep" => Ok(Mode::Sep),
            "n2s" => Ok(Mode::N2s),
            "s2n" => Ok(Mode::S2n),
            "int" => Ok(Mode::Int),
            other => Err(Error::config(format!("unknown mode '{other}'"))),
        }
    }
}

/// Architecture hyperparameters. Embedding dimension and feature counts
/// come from the [`FeatureSchema`]; everything else lives here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub backbone: Backbone,
    pub mode: Mode,
    /// Context columns prepended to the sequence; must equal `n_sum`
    /// because the first-layer non-sequence summary is the CLS block.
    pub c_cls: usize,
    pub k_pma: usize,
    pub k_recent: usize,
    pub n_sum: usize,
    pub head_hidden: Vec<usize>,
    pub interaction_hidden: usize,
    pub pffn_hidden: usize,
    pub mask_hidden: usize,
    pub gate_hidden: usize,
    pub activation: Activation,
    pub gating_sigma: Activation,
    pub rope_base: f64,
    pub ln_eps: f64,
    pub fm_rank: usize,
    pub dcn_depth: usize,
    /// Low-rank kernel width for cross layers; 0 forces full kernels.
    /// Low rank is used only when it actually saves parameters.
    pub dcn_rank: usize,
    pub dhen_depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            heads: 2,
            backbone: Backbone::Dhen,
            mode: Mode::Int,
            c_cls: 4,
            k_pma: 2,
            k_recent: 2,
            n_sum: 4,
            head_hidden: vec![64, 32],
            interaction_hidden: 32,
            pffn_hidden: 16,
            mask_hidden: 16,
            gate_hidden: 8,
            activation: Activation::Swish,
            gating_sigma: Activation::Identity,
            rope_base: 10_000.0,
            ln_eps: 1e-12,
            fm_rank: 16,
            dcn_depth: 2,
            dcn_rank: 32,
            dhen_depth: 1,
        }
    }
}

impl ModelConfig {
    /// Columns of the sequence summary.
    pub fn summary_width(&self) -> usize {
        self.c_cls + self.k_pma + self.k_recent
    }

    /// Columns of the non-sequence matrix entering the layer loop.
    pub fn nonseq_width(&self, schema: &FeatureSchema) -> usize {
        schema.nonseq_columns() + usize::from(self.mode == Mode::Sole)
    }

    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        schema.validate()?;
        let d = schema.embedding_dim;
        if self.layers == 0 {
            return Err(Error::config("layers must be at least 1"));
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::config(format!(
                "embedding dim {d} must divide evenly into {} heads",
                self.heads
            )));
        }
        if (d / self.heads) % 2 != 0 {
            return Err(Error::config(format!(
                "head dim {} must be even for rotary positions",
                d / self.heads
            )));
        }
        if self.c_cls != self.n_sum {
            return Err(Error::config(format!(
                "c_cls ({}) must equal n_sum ({}): the first-layer summary is the CLS block",
                self.c_cls, self.n_sum
            )));
        }
        if self.n_sum == 0 || self.k_pma == 0 {
            return Err(Error::config("n_sum and k_pma must be at least 1"));
        }
        let n = schema.nonseq_columns();
        if self.n_sum >= n {
            return Err(Error::config(format!(
                "n_sum ({}) must be smaller than the {n} non-sequence columns",
                self.n_sum
            )));
        }
        if self.interaction_hidden == 0
            || self.pffn_hidden == 0
            || self.mask_hidden == 0
            || self.gate_hidden == 0
        {
            return Err(Error::config("hidden sizes must be at least 1"));
        }
        if !matches!(
            self.gating_sigma,
            Activation::Identity | Activation::Sigmoid | Activation::Tanh
        ) {
            return Err(Error::config(
                "gating sigma must be identity, sigmoid, or tanh",
            ));
        }
        if !(self.rope_base > 1.0) {
            return Err(Error::config("rope_base must exceed 1"));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::config("ln_eps must be positive"));
        }
        if self.fm_rank == 0 || self.dcn_depth == 0 || self.dhen_depth == 0 {
            return Err(Error::config("backbone depth/rank settings must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EmbedLayout {
    pub w_dense: Option<ParamId>,
    pub sparse_tables: Vec<ParamId>,
    pub seq_tables: Vec<ParamId>,
}

#[derive(Debug, Clone)]
pub struct MaskNetLayout {
    pub gate: MlpIds,
    pub combine: LinearIds,
}

#[derive(Debug, Clone)]
pub enum DcnKernelLayout {
    Full(ParamId),
    LowRank { u: ParamId, v: ParamId },
}

#[derive(Debug, Clone)]
pub struct DcnLayerLayout {
    pub kernel: DcnKernelLayout,
    pub bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct DhenLayerLayout {
    pub dcn: DcnLayerLayout,
    pub projection: LinearIds,
    pub shortcut: LinearIds,
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone)]
pub enum BackboneLayout {
    Dot,
    Fm { v: ParamId, w: ParamId, w0: ParamId },
    Dcn(Vec<DcnLayerLayout>),
    Dhen(Vec<DhenLayerLayout>),
}

#[derive(Debug, Clone)]
pub struct InteractionLayout {
    pub backbone: BackboneLayout,
    pub out_mlp: MlpIds,
}

#[derive(Debug, Clone)]
pub struct SequenceLayout {
    pub pffn: MlpIds,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

#[derive(Debug, Clone)]
pub struct LayerLayout {
    pub interaction: InteractionLayout,
    pub sequence: SequenceLayout,
}

/// One summary-exchange parameter set. The layer loop uses sets `0..L`;
/// set `L` produces the terminal summaries for the head.
#[derive(Debug, Clone)]
pub struct CrossLayout {
    pub x_lce: ParamId,
    pub x_gate: MlpIds,
    pub pma_seeds: ParamId,
    pub pma_wq: ParamId,
    pub pma_wk: ParamId,
    pub pma_wv: ParamId,
    pub pma_wo: ParamId,
    pub s_gate: MlpIds,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub embed: EmbedLayout,
    pub mask_net: MaskNetLayout,
    pub layers: Vec<LayerLayout>,
    pub cross: Vec<CrossLayout>,
    pub head: MlpIds,
}

/// The assembled model: flat parameter store plus the typed layout over
/// it, the configuration, and the schema it was built for.
#[derive(Clone)]
pub struct ModelParams {
    pub set: ParamSet,
    pub layout: Layout,
    pub config: ModelConfig,
    pub schema: FeatureSchema,
}

impl fmt::Debug for ModelParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelParams")
            .field("config", &self.config)
            .field("tensors", &self.set.len())
            .field("scalars", &self.set.numel())
            .finish()
    }
}

/// Flattened-feature length entering a backbone's reshaping network.
fn backbone_feature_len(backbone: Backbone, d: usize, m: usize, _config: &ModelConfig) -> usize {
    match backbone {
        Backbone::Dot => m * (m + 1) / 2,
        Backbone::Fm => 1,
        Backbone::Dcn | Backbone::Dhen => d * m,
    }
}

fn use_low_rank(flat_len: usize, dcn_rank: usize) -> bool {
    dcn_rank > 0 && 2 * dcn_rank < flat_len
}

fn create_dcn_layer(
    pb: &mut ParamBuilder,
    name: &str,
    flat_len: usize,
    dcn_rank: usize,
    rng: &mut ChaCha8Rng,
) -> DcnLayerLayout {
    let bound = 1.0 / (flat_len as f64).sqrt();
    let kernel = if use_low_rank(flat_len, dcn_rank) {
        DcnKernelLayout::LowRank {
            u: pb.add(format!("{name}.u"), uniform_init(rng, flat_len, dcn_rank, bound)),
            v: pb.add(format!("{name}.v"), uniform_init(rng, dcn_rank, flat_len, bound)),
        }
    } else {
        DcnKernelLayout::Full(
            pb.add(format!("{name}.w"), uniform_init(rng, flat_len, flat_len, bound)),
        )
    };
    DcnLayerLayout {
        kernel,
        bias: pb.add(format!("{name}.b"), Tensor::zeros(flat_len, 1).expect("bias shape")),
    }
}

fn create_gate(
    pb: &mut ParamBuilder,
    name: &str,
    d: usize,
    hidden: usize,
    rng: &mut ChaCha8Rng,
) -> MlpIds {
    // Output layer starts at exactly one, so gating is transparent until
    // trained away from it.
    let l0 = LinearIds::create(pb, &format!("{name}.0"), hidden, d, LinearInit::FanIn, rng);
    let l1 = LinearIds::create(
        pb,
        &format!("{name}.1"),
        d,
        hidden,
        LinearInit::ZeroWithBias(1.0),
        rng,
    );
    MlpIds { layers: vec![l0, l1] }
}

fn create_attention(
    pb: &mut ParamBuilder,
    name: &str,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> (ParamId, ParamId, ParamId, ParamId) {
    let bound = 1.0 / (d as f64).sqrt();
    (
        pb.add(format!("{name}.wq"), uniform_init(rng, d, d, bound)),
        pb.add(format!("{name}.wk"), uniform_init(rng, d, d, bound)),
        pb.add(format!("{name}.wv"), uniform_init(rng, d, d, bound)),
        pb.add(format!("{name}.wo"), uniform_init(rng, d, d, bound)),
    )
}

impl ModelParams {
    /// Builds a freshly initialized model. Deterministic in `seed`.
    pub fn new(config: ModelConfig, schema: FeatureSchema, seed: u64) -> Result<Self> {
        config.validate(&schema)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new();
        let d = schema.embedding_dim;
        let k = schema.sequences.len();
        let embed_bound = 1.0 / (d as f64).sqrt();

        let w_dense = (schema.dense_count > 0).then(|| {
            pb.add(
                "embed.dense",
                uniform_init(&mut rng, d, schema.dense_count, 1.0 / (schema.dense_count as f64).sqrt()),
            )
        });
        let sparse_tables = schema
            .sparse
            .iter()
            .map(|s| {
                pb.add(
                    format!("embed.sparse.{}", s.name),
                    uniform_init(&mut rng, s.vocab, d, embed_bound),
                )
            })
            .collect();
        let seq_tables = schema
            .sequences
            .iter()
            .map(|s| {
                pb.add(
                    format!("embed.seq.{}", s.name),
                    uniform_init(&mut rng, s.vocab, d, embed_bound),
                )
            })
            .collect();
        let embed = EmbedLayout { w_dense, sparse_tables, seq_tables };

        // Gate bias starts positive so the sigmoid mask passes most signal
        // through from the first step.
        let g0 = LinearIds::create(
            &mut pb,
            "masknet.gate.0",
            config.mask_hidden,
            k * d,
            LinearInit::FanIn,
            &mut rng,
        );
        let g1 = LinearIds::create(
            &mut pb,
            "masknet.gate.1",
            k * d,
            config.mask_hidden,
            LinearInit::FanInWithBias(2.0),
            &mut rng,
        );
        let combine = LinearIds::create(
            &mut pb,
            "masknet.combine",
            d,
            k * d,
            LinearInit::FanIn,
            &mut rng,
        );
        let mask_net = MaskNetLayout { gate: MlpIds { layers: vec![g0, g1] }, combine };

        let n_x = config.nonseq_width(&schema);
        // Interaction input: current features plus the sequence summary
        // except under `sole`, which never concatenates one.
        let m_cols = if config.mode == Mode::Sole { n_x } else { n_x + config.summary_width() };
        let flat_len = d * m_cols;
        let ut_len = m_cols * (m_cols + 1) / 2;

        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let base = format!("layer{l}");
            let backbone = match config.backbone {
                Backbone::Dot => BackboneLayout::Dot,
                Backbone::Fm => {
                    let bound = 1.0 / (flat_len as f64).sqrt();
                    BackboneLayout::Fm {
                        v: pb.add(
                            format!("{base}.interaction.fm.v"),
                            uniform_init(&mut rng, flat_len, config.fm_rank, bound),
                        ),
                        w: pb.add(
                            format!("{base}.interaction.fm.w"),
                            uniform_init(&mut rng, flat_len, 1, bound),
                        ),
                        w0: pb.add(
                            format!("{base}.interaction.fm.w0"),
                            Tensor::zeros(1, 1).expect("scalar"),
                        ),
                    }
                }
                Backbone::Dcn => BackboneLayout::Dcn(
                    (0..config.dcn_depth)
                        .map(|i| {
                            create_dcn_layer(
                                &mut pb,
                                &format!("{base}.interaction.dcn{i}"),
                                flat_len,
                                config.dcn_rank,
                                &mut rng,
                            )
                        })
                        .collect(),
                ),
                Backbone::Dhen => BackboneLayout::Dhen(
                    (0..config.dhen_depth)
                        .map(|i| {
                            let name = format!("{base}.interaction.dhen{i}");
                            let dcn = create_dcn_layer(
                                &mut pb,
                                &format!("{name}.dcn"),
                                flat_len,
                                config.dcn_rank,
                                &mut rng,
                            );
                            let projection = LinearIds::create(
                                &mut pb,
                                &format!("{name}.proj"),
                                flat_len,
                                ut_len + flat_len,
                                LinearInit::FanIn,
                                &mut rng,
                            );
                            let shortcut = LinearIds::create(
                                &mut pb,
                                &format!("{name}.short"),
                                flat_len,
                                flat_len,
                                LinearInit::FanIn,
                                &mut rng,
                            );
                            let gamma = pb.add(
                                format!("{name}.norm.gamma"),
                                Tensor::full(1, d, 1.0).expect("gamma shape"),
                            );
                            let beta = pb.add(
                                format!("{name}.norm.beta"),
                                Tensor::zeros(1, d).expect("beta shape"),
                            );
                            DhenLayerLayout { dcn, projection, shortcut, gamma, beta }
                        })
                        .collect(),
                ),
            };
            let feat_len = backbone_feature_len(config.backbone, d, m_cols, &config);
            let out_mlp = MlpIds::create(
                &mut pb,
                &format!("{base}.interaction.out"),
                &[feat_len, config.interaction_hidden, d * n_x],
                &mut rng,
            );
            let interaction = InteractionLayout { backbone, out_mlp };

            // Conditioning network output starts at zero; the identity
            // offset inside the transform keeps layer 0 a pass-through.
            let p0 = LinearIds::create(
                &mut pb,
                &format!("{base}.sequence.pffn.0"),
                config.pffn_hidden,
                d * config.n_sum,
                LinearInit::FanIn,
                &mut rng,
            );
            let p1 = LinearIds::create(
                &mut pb,
                &format!("{base}.sequence.pffn.1"),
                d * d,
                config.pffn_hidden,
                LinearInit::Zero,
                &mut rng,
            );
            let (wq, wk, wv, wo) =
                create_attention(&mut pb, &format!("{base}.sequence.attn"), d, &mut rng);
            let ln_gamma = pb.add(
                format!("{base}.sequence.norm.gamma"),
                Tensor::full(1, d, 1.0).expect("gamma shape"),
            );
            let ln_beta = pb.add(
                format!("{base}.sequence.norm.beta"),
                Tensor::zeros(1, d).expect("beta shape"),
            );
            let sequence = SequenceLayout {
                pffn: MlpIds { layers: vec![p0, p1] },
                wq,
                wk,
                wv,
                wo,
                ln_gamma,
                ln_beta,
            };
            layers.push(LayerLayout { interaction, sequence });
        }

        let mut cross = Vec::with_capacity(config.layers + 1);
        for l in 0..=config.layers {
            let base = format!("cross{l}");
            let x_lce = pb.add(
                format!("{base}.nonseq.lce"),
                uniform_init(&mut rng, n_x, config.n_sum, 1.0 / (n_x as f64).sqrt()),
            );
            let x_gate = create_gate(&mut pb, &format!("{base}.nonseq.gate"), d, config.gate_hidden, &mut rng);
            let pma_seeds = pb.add(
                format!("{base}.seq.pma.seeds"),
                uniform_init(&mut rng, config.k_pma, d, embed_bound),
            );
            let (pma_wq, pma_wk, pma_wv, pma_wo) =
                create_attention(&mut pb, &format!("{base}.seq.pma"), d, &mut rng);
            let s_gate = create_gate(&mut pb, &format!("{base}.seq.gate"), d, config.gate_hidden, &mut rng);
            cross.push(CrossLayout { x_lce, x_gate, pma_seeds, pma_wq, pma_wk, pma_wv, pma_wo, s_gate });
        }

        let head_in = d * (config.n_sum + config.summary_width());
        let mut head_sizes = vec![head_in];
        head_sizes.extend(&config.head_hidden);
        head_sizes.push(1);
        let head = MlpIds::create(&mut pb, "head", &head_sizes, &mut rng);

        Ok(ModelParams {
            set: pb.finish(),
            layout: Layout { embed, mask_net, layers, cross, head },
            config,
            schema,
        })
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.set.bind(g)
    }

    fn embed_nodes(&self, b: &Bound) -> EmbedNodes {
        EmbedNodes {
            w_dense: self.layout.embed.w_dense.map(|p| b.node(p)),
            sparse_tables: self.layout.embed.sparse_tables.iter().map(|&p| b.node(p)).collect(),
            seq_tables: self.layout.embed.seq_tables.iter().map(|&p| b.node(p)).collect(),
        }
    }

    fn mask_net_nodes(&self, b: &Bound) -> MaskNetNodes {
        MaskNetNodes {
            mask_mlp: self.layout.mask_net.gate.bind(b, self.config.activation, Activation::Sigmoid),
            combine: self.layout.mask_net.combine.bind(b),
        }
    }

    fn interaction_nodes(&self, b: &Bound, l: usize) -> InteractionLayerNodes {
        let lay = &self.layout.layers[l].interaction;
        let backbone = match &lay.backbone {
            BackboneLayout::Dot => BackboneNodes::Dot,
            BackboneLayout::Fm { v, w, w0 } => BackboneNodes::Fm {
                v: b.node(*v),
                w: b.node(*w),
                w0: b.node(*w0),
            },
            BackboneLayout::Dcn(layers) => BackboneNodes::Dcn(
                layers.iter().map(|dl| bind_dcn(dl, b)).collect(),
            ),
            BackboneLayout::Dhen(layers) => BackboneNodes::Dhen(
                layers
                    .iter()
                    .map(|dh| DhenLayerNodes {
                        modules: vec![
                            DhenModuleNodes::Dot,
                            DhenModuleNodes::Dcn(bind_dcn(&dh.dcn, b)),
                        ],
                        projection: dh.projection.bind(b),
                        shortcut: dh.shortcut.bind(b),
                        norm_gamma: b.node(dh.gamma),
                        norm_beta: b.node(dh.beta),
                        norm_eps: self.config.ln_eps,
                    })
                    .collect(),
            ),
        };
        InteractionLayerNodes {
            backbone,
            out_mlp: lay.out_mlp.bind(b, self.config.activation, Activation::Identity),
        }
    }

    fn sequence_nodes(&self, b: &Bound, l: usize) -> SequenceLayerNodes {
        let lay = &self.layout.layers[l].sequence;
        SequenceLayerNodes {
            pffn: PffnNodes {
                mlp: lay.pffn.bind(b, self.config.activation, Activation::Identity),
            },
            mha: MhaNodes {
                wq: b.node(lay.wq),
                wk: b.node(lay.wk),
                wv: b.node(lay.wv),
                wo: b.node(lay.wo),
                heads: self.config.heads,
            },
            ln_gamma: b.node(lay.ln_gamma),
            ln_beta: b.node(lay.ln_beta),
            ln_eps: self.config.ln_eps,
        }
    }

    fn nonseq_summary_nodes(&self, b: &Bound, l: usize) -> NonSeqSummaryNodes {
        let c = &self.layout.cross[l];
        NonSeqSummaryNodes {
            lce_w: b.node(c.x_lce),
            gating: GatingNodes {
                mlp: c.x_gate.bind(b, self.config.activation, Activation::Identity),
                sigma: self.config.gating_sigma,
            },
        }
    }

    fn seq_summary_nodes(&self, b: &Bound, l: usize) -> SeqSummaryNodes {
        let c = &self.layout.cross[l];
        SeqSummaryNodes {
            pma_seeds: b.node(c.pma_seeds),
            pma_mha: MhaNodes {
                wq: b.node(c.pma_wq),
                wk: b.node(c.pma_wk),
                wv: b.node(c.pma_wv),
                wo: b.node(c.pma_wo),
                heads: self.config.heads,
            },
            gating: GatingNodes {
                mlp: c.s_gate.bind(b, self.config.activation, Activation::Identity),
                sigma: self.config.gating_sigma,
            },
            k_recent: self.config.k_recent,
        }
    }

    fn head_nodes(&self, b: &Bound) -> MlpNodes {
        self.layout.head.bind(b, self.config.activation, Activation::Identity)
    }

    /// Full forward pass for one example on its own graph. Returns the
    /// pre-sigmoid logit and the clamped probability.
    pub fn forward(&self, g: &mut Graph, b: &Bound, ex: &RawExample) -> Result<ForwardPass> {
        let d = self.schema.embedding_dim;
        let config = &self.config;
        let embedded = pipeline::embed_example(g, &self.schema, ex, &self.embed_nodes(b))?;
        let mask_nodes = self.mask_net_nodes(b);
        let s1 = pipeline::mask_net(g, &embedded.seqs, &mask_nodes)?;
        let mut x = embedded.x;

        if config.mode == Mode::Sole {
            let pooled = pipeline::mean_pool_valid(g, s1, &embedded.valid)?;
            x = g.concat_cols(&[x, pooled])?;
            for l in 0..config.layers {
                let nodes = self.interaction_nodes(b, l);
                x = interaction::interaction_arch_layer(g, x, None, &nodes)?;
            }
            let final_nodes = self.nonseq_summary_nodes(b, config.layers);
            let x_sum = cross::summarize_nonseq(g, x, &final_nodes)?;
            let s_sum = g.constant(Tensor::zeros(d, config.summary_width())?)?;
            let head = self.head_nodes(b);
            return predict_head(g, x_sum, s_sum, &head);
        }

        // First-layer non-sequence summary doubles as the CLS block.
        let x_sum_first = if config.mode.seq_receives_nonseq() {
            let nodes = self.nonseq_summary_nodes(b, 0);
            Some(cross::summarize_nonseq(g, x, &nodes)?)
        } else {
            None
        };
        let cls = match x_sum_first {
            Some(n) => n,
            None => g.constant(Tensor::zeros(d, config.c_cls)?)?,
        };
        let mut s = sequence::prepend_cls(g, Some(cls), s1)?;

        let total_tokens = config.c_cls + self.schema.max_seq_len;
        let rope = RopeSpec {
            positions: Arc::new((0..total_tokens).collect()),
            base: config.rope_base,
        };
        let mut key_mask = vec![true; config.c_cls];
        key_mask.extend_from_slice(&embedded.valid);
        let key_mask = Arc::new(key_mask);

        for l in 0..config.layers {
            let x_sum = if config.mode.seq_receives_nonseq() {
                if l == 0 {
                    x_sum_first.unwrap()
                } else {
                    let nodes = self.nonseq_summary_nodes(b, l);
                    cross::summarize_nonseq(g, x, &nodes)?
                }
            } else {
                g.constant(Tensor::zeros(d, config.n_sum)?)?
            };
            let s_sum = if config.mode.nonseq_receives_seq() {
                let nodes = self.seq_summary_nodes(b, l);
                cross::summarize_seq(g, s, config.c_cls, &nodes, &embedded.valid)?
            } else {
                g.constant(Tensor::zeros(d, config.summary_width())?)?
            };

            let int_nodes = self.interaction_nodes(b, l);
            let x_next = interaction::interaction_arch_layer(g, x, Some(s_sum), &int_nodes)?;
            let seq_nodes = self.sequence_nodes(b, l);
            let s_next = sequence::sequence_arch_layer(
                g,
                s,
                x_sum,
                &seq_nodes,
                Some(&rope),
                Some(&key_mask),
            )?;
            x = x_next;
            s = s_next;
        }

        // Terminal summaries always use real values; the head fuses both.
        let x_final_nodes = self.nonseq_summary_nodes(b, config.layers);
        let x_sum = cross::summarize_nonseq(g, x, &x_final_nodes)?;
        let s_final_nodes = self.seq_summary_nodes(b, config.layers);
        let s_sum = cross::summarize_seq(g, s, config.c_cls, &s_final_nodes, &embedded.valid)?;
        let head = self.head_nodes(b);
        predict_head(g, x_sum, s_sum, &head)
    }

    /// Convenience: one example on a throwaway graph, returning the
    /// clamped click probability.
    pub fn predict(&self, ex: &RawExample) -> Result<f64> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let fp = self.forward(&mut g, &b, ex)?;
        g.value(fp.prob).item()
    }

    /// Closed-form parameter count; must match the store exactly.
    pub fn expected_param_count(config: &ModelConfig, schema: &FeatureSchema) -> usize {
        let d = schema.embedding_dim;
        let k = schema.sequences.len();
        let mut total = 0;

        if schema.dense_count > 0 {
            total += d * schema.dense_count;
        }
        total += schema.sparse.iter().map(|s| s.vocab * d).sum::<usize>();
        total += schema.sequences.iter().map(|s| s.vocab * d).sum::<usize>();

        let kd = k * d;
        total += config.mask_hidden * kd + config.mask_hidden; // gate.0
        total += kd * config.mask_hidden + kd; // gate.1
        total += d * kd + d; // combine

        let n_x = config.nonseq_width(schema);
        let m_cols = if config.mode == Mode::Sole { n_x } else { n_x + config.summary_width() };
        let flat_len = d * m_cols;
        let ut_len = m_cols * (m_cols + 1) / 2;
        let kernel = if use_low_rank(flat_len, config.dcn_rank) {
            2 * flat_len * config.dcn_rank
        } else {
            flat_len * flat_len
        };

        let backbone = match config.backbone {
            Backbone::Dot => 0,
            Backbone::Fm => flat_len * config.fm_rank + flat_len + 1,
            Backbone::Dcn => config.dcn_depth * (kernel + flat_len),
            Backbone::Dhen => {
                config.dhen_depth
                    * (kernel + flat_len                      // dcn
                        + flat_len * (ut_len + flat_len) + flat_len // projection
                        + flat_len * flat_len + flat_len      // shortcut
                        + 2 * d)                              // norm affine
            }
        };
        let feat_len = backbone_feature_len(config.backbone, d, m_cols, config);
        let out_mlp = config.interaction_hidden * feat_len
            + config.interaction_hidden
            + d * n_x * config.interaction_hidden
            + d * n_x;
        let pffn = config.pffn_hidden * (d * config.n_sum)
            + config.pffn_hidden
            + d * d * config.pffn_hidden
            + d * d;
        let attn = 4 * d * d;
        let seq_norm = 2 * d;
        total += config.layers * (backbone + out_mlp + pffn + attn + seq_norm);

        let gate = config.gate_hidden * d + config.gate_hidden + d * config.gate_hidden + d;
        let per_cross = n_x * config.n_sum   // lce
            + gate                            // nonseq gate
            + config.k_pma * d                // seeds
            + 4 * d * d                       // pma attention
            + gate; // seq gate
        total += (config.layers + 1) * per_cross;

        let head_in = d * (config.n_sum + config.summary_width());
        let mut prev = head_in;
        for &h in &config.head_hidden {
            total += h * prev + h;
            prev = h;
        }
        total += prev + 1; // final logit layer

        total
    }
}

fn bind_dcn(layout: &DcnLayerLayout, b: &Bound) -> DcnLayerNodes {
    let kernel = match &layout.kernel {
        DcnKernelLayout::Full(w) => DcnKernel::Full(b.node(*w)),
        DcnKernelLayout::LowRank { u, v } => DcnKernel::LowRank { u: b.node(*u), v: b.node(*v) },
    };
    DcnLayerNodes { kernel, bias: b.node(layout.bias) }
}

/// Logit and clamped probability of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardPass {
    pub logit: NodeId,
    pub prob: NodeId,
}

/// Fuses the two terminal summaries, flattens, applies the head network,
/// and squashes to a probability clamped into `[1e-7, 1 - 1e-7]`.
pub fn predict_head(
    g: &mut Graph,
    x_sum: NodeId,
    s_sum: NodeId,
    head: &MlpNodes,
) -> Result<ForwardPass> {
    let fused = g.concat_cols(&[x_sum, s_sum])?;
    let flat = g.flatten(fused)?;
    let logit = crate::nn::mlp_cols(g, head, flat)?;
    if g.value(logit).numel() != 1 {
        return Err(Error::InvalidShape {
            op: "predict_head",
            rows: g.value(logit).rows(),
            cols: g.value(logit).cols(),
            reason: "head must emit a single logit".to_string(),
        });
    }
    let raw = g.activation(logit, Activation::Sigmoid)?;
    let prob = g.clamp(raw, 1e-7, 1.0 - 1e-7)?;
    Ok(ForwardPass { logit, prob })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, GenConfig};
    use crate::nn::mlp_cols;
    use rand::Rng;

    fn desk_schema_config() -> (GenConfig, ModelConfig) {
        let gen = GenConfig {
            num_examples: 40,
            num_users: 8,
            dense_count: 2,
            sparse_vocabs: vec![8, 5, 5],
            seq_count: 1,
            max_seq_len: 6,
            embedding_dim: 8,
            ..GenConfig::default()
        };
        let config = ModelConfig {
            layers: 1,
            c_cls: 2,
            n_sum: 2,
            k_pma: 1,
            k_recent: 1,
            head_hidden: vec![8],
            interaction_hidden: 8,
            pffn_hidden: 4,
            mask_hidden: 4,
            gate_hidden: 4,
            ..ModelConfig::default()
        };
        (gen, config)
    }

    fn build(mode: Mode, backbone: Backbone, layers: usize) -> (ModelParams, Vec<RawExample>) {
        let (gen, mut config) = desk_schema_config();
        config.mode = mode;
        config.backbone = backbone;
        config.layers = layers;
        let ds = generate_synthetic(&gen, 42).unwrap();
        let params = ModelParams::new(config, ds.schema.clone(), 7).unwrap();
        (params, ds.examples)
    }

    fn logit_of(params: &ModelParams, ex: &RawExample) -> f64 {
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let fp = params.forward(&mut g, &b, ex).unwrap();
        g.value(fp.logit).item().unwrap()
    }

    #[test]
    fn forward_is_deterministic_bit_for_bit() {
        let (params, exs) = build(Mode::Int, Backbone::Dhen, 1);
        for ex in exs.iter().take(5) {
            assert_eq!(logit_of(&params, ex).to_bits(), logit_of(&params, ex).to_bits());
        }
    }

    #[test]
    fn probability_stays_inside_the_clamp() {
        let (params, exs) = build(Mode::Int, Backbone::Dot, 1);
        for ex in exs.iter().take(10) {
            let mut g = Graph::new();
            let b = params.bind(&mut g);
            let fp = params.forward(&mut g, &b, ex).unwrap();
            let p = g.value(fp.prob).item().unwrap();
            assert!((1e-7..=1.0 - 1e-7).contains(&p));
        }
    }

    #[test]
    fn zeroed_head_emits_one_half() {
        let (mut params, exs) = build(Mode::Int, Backbone::Dot, 1);
        for lin in params.layout.head.layers.clone() {
            let w = params.set.tensor(lin.w).clone();
            params.set.replace(lin.w.index(), Tensor::zeros(w.rows(), w.cols()).unwrap());
            let b = params.set.tensor(lin.b).clone();
            params.set.replace(lin.b.index(), Tensor::zeros(b.rows(), b.cols()).unwrap());
        }
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let fp = params.forward(&mut g, &b, &exs[0]).unwrap();
        assert_eq!(g.value(fp.logit).item().unwrap(), 0.0);
        assert_eq!(g.value(fp.prob).item().unwrap(), 0.5);
    }

    #[test]
    fn head_matches_explicit_mlp_then_sigmoid_oracle() {
        let (params, _) = build(Mode::Int, Backbone::Dot, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let d = params.schema.embedding_dim;
            let mut g = Graph::new();
            let b = params.bind(&mut g);
            let x_sum = g
                .leaf(Tensor::from_fn(d, params.config.n_sum, |_, _| rng.gen_range(-1.0..1.0)).unwrap())
                .unwrap();
            let s_sum = g
                .leaf(
                    Tensor::from_fn(d, params.config.summary_width(), |_, _| rng.gen_range(-1.0..1.0))
                        .unwrap(),
                )
                .unwrap();
            let head = params.head_nodes(&b);
            let fp = predict_head(&mut g, x_sum, s_sum, &head).unwrap();

            let fused = g.concat_cols(&[x_sum, s_sum]).unwrap();
            let flat = g.flatten(fused).unwrap();
            let logit = mlp_cols(&mut g, &head, flat).unwrap();
            let expect = crate::tensor::sigmoid(g.value(logit).item().unwrap());
            let got = g.value(fp.prob).item().unwrap();
            assert!((got - expect.clamp(1e-7, 1.0 - 1e-7)).abs() < 1e-15);
        }
    }

    #[test]
    fn single_layer_forward_matches_hand_composed_pipeline() {
        let (params, exs) = build(Mode::Int, Backbone::Dhen, 1);
        let ex = &exs[1];
        let fast = logit_of(&params, ex);

        // Hand-compose the same graph from the public module operations.
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let config = &params.config;
        let embedded =
            pipeline::embed_example(&mut g, &params.schema, ex, &params.embed_nodes(&b)).unwrap();
        let mask_nodes = params.mask_net_nodes(&b);
        let s1 = pipeline::mask_net(&mut g, &embedded.seqs, &mask_nodes).unwrap();

        let x_sum_1 =
            cross::summarize_nonseq(&mut g, embedded.x, &params.nonseq_summary_nodes(&b, 0)).unwrap();
        let s = sequence::prepend_cls(&mut g, Some(x_sum_1), s1).unwrap();
        let s_sum_1 = cross::summarize_seq(
            &mut g,
            s,
            config.c_cls,
            &params.seq_summary_nodes(&b, 0),
            &embedded.valid,
        )
        .unwrap();

        let int_nodes = params.interaction_nodes(&b, 0);
        let x2 =
            interaction::interaction_arch_layer(&mut g, embedded.x, Some(s_sum_1), &int_nodes).unwrap();
        let rope = RopeSpec {
            positions: Arc::new((0..config.c_cls + params.schema.max_seq_len).collect()),
            base: config.rope_base,
        };
        let mut mask = vec![true; config.c_cls];
        mask.extend_from_slice(&embedded.valid);
        let seq_nodes = params.sequence_nodes(&b, 0);
        let s2 = sequence::sequence_arch_layer(
            &mut g,
            s,
            x_sum_1,
            &seq_nodes,
            Some(&rope),
            Some(&Arc::new(mask)),
        )
        .unwrap();

        let x_sum_f =
            cross::summarize_nonseq(&mut g, x2, &params.nonseq_summary_nodes(&b, 1)).unwrap();
        let s_sum_f = cross::summarize_seq(
            &mut g,
            s2,
            config.c_cls,
            &params.seq_summary_nodes(&b, 1),
            &embedded.valid,
        )
        .unwrap();
        let head = params.head_nodes(&b);
        let fp = predict_head(&mut g, x_sum_f, s_sum_f, &head).unwrap();
        let slow = g.value(fp.logit).item().unwrap();
        assert_eq!(fast.to_bits(), slow.to_bits());
    }

    #[test]
    fn sep_mode_ignores_in_loop_cross_parameters() {
        let (params, exs) = build(Mode::Sep, Backbone::Dot, 2);
        let base: Vec<f64> = exs.iter().take(4).map(|e| logit_of(&params, e)).collect();

        // Zero every in-loop cross tensor (sets 0..L); the terminal set L
        // feeds the head and must keep its values.
        let mut zeroed = params.clone();
        for l in 0..zeroed.config.layers {
            let c = zeroed.layout.cross[l].clone();
            let mut ids = vec![c.x_lce, c.pma_seeds, c.pma_wq, c.pma_wk, c.pma_wv, c.pma_wo];
            for lin in c.x_gate.layers.iter().chain(c.s_gate.layers.iter()) {
                ids.push(lin.w);
                ids.push(lin.b);
            }
            for id in ids {
                let t = zeroed.set.tensor(id).clone();
                zeroed.set.replace(id.index(), Tensor::zeros(t.rows(), t.cols()).unwrap());
            }
        }
        let after: Vec<f64> = exs.iter().take(4).map(|e| logit_of(&zeroed, e)).collect();
        assert_eq!(base, after);
    }

    fn grads_for(params: &ModelParams, ex: &RawExample) -> Vec<Vec<f64>> {
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let fp = params.forward(&mut g, &b, ex).unwrap();
        let loss = g.ln(fp.prob).unwrap();
        let loss = g.scale(loss, -1.0).unwrap();
        g.backward(loss).unwrap();
        let mut grads = params.set.zero_grads();
        b.accumulate_grads(&g, &mut grads);
        grads
    }

    fn gate_grad_norms(params: &ModelParams, grads: &[Vec<f64>], seq_side: bool) -> f64 {
        let mut acc = 0.0;
        for l in 0..params.config.layers {
            let c = &params.layout.cross[l];
            let gate = if seq_side { &c.s_gate } else { &c.x_gate };
            for lin in &gate.layers {
                acc += grads[lin.w.index()].iter().map(|v| v.abs()).sum::<f64>();
                acc += grads[lin.b.index()].iter().map(|v| v.abs()).sum::<f64>();
            }
        }
        acc
    }

    #[test]
    fn information_flow_is_gated_by_mode() {
        let (params_n2s, exs) = build(Mode::N2s, Backbone::Dot, 1);
        let g_n2s = grads_for(&params_n2s, &exs[0]);
        assert_eq!(gate_grad_norms(&params_n2s, &g_n2s, true), 0.0);
        assert!(gate_grad_norms(&params_n2s, &g_n2s, false) > 0.0);

        let (params_s2n, _) = build(Mode::S2n, Backbone::Dot, 1);
        let g_s2n = grads_for(&params_s2n, &exs[0]);
        assert_eq!(gate_grad_norms(&params_s2n, &g_s2n, false), 0.0);
        assert!(gate_grad_norms(&params_s2n, &g_s2n, true) > 0.0);

        let (params_int, _) = build(Mode::Int, Backbone::Dot, 1);
        let g_int = grads_for(&params_int, &exs[0]);
        assert!(gate_grad_norms(&params_int, &g_int, false) > 0.0);
        assert!(gate_grad_norms(&params_int, &g_int, true) > 0.0);
    }

    #[test]
    fn parameter_count_matches_the_closed_form() {
        for mode in Mode::ALL {
            for backbone in [Backbone::Dot, Backbone::Fm, Backbone::Dcn, Backbone::Dhen] {
                let (params, _) = build(mode, backbone, 2);
                assert_eq!(
                    params.set.numel(),
                    ModelParams::expected_param_count(&params.config, &params.schema),
                    "mode {mode} backbone {backbone}"
                );
            }
        }
    }

    #[test]
    fn stacking_up_to_four_layers_runs_forward_and_backward() {
        for layers in 1..=4 {
            let (params, exs) = build(Mode::Int, Backbone::Dot, layers);
            let mut g = Graph::new();
            let b = params.bind(&mut g);
            let fp = params.forward(&mut g, &b, &exs[0]).unwrap();
            let loss = g.ln(fp.prob).unwrap();
            g.backward(loss).unwrap();
            assert!(g.value(fp.prob).item().unwrap().is_finite());
        }
    }

    #[test]
    fn every_mode_and_backbone_assembles_and_runs() {
        for mode in Mode::ALL {
            for backbone in [Backbone::Dot, Backbone::Dcn, Backbone::Dhen] {
                let (params, exs) = build(mode, backbone, 1);
                let v = logit_of(&params, &exs[0]);
                assert!(v.is_finite(), "mode {mode} backbone {backbone}");
            }
        }
    }

    #[test]
    fn evaluation_order_does_not_change_logits() {
        let (params, exs) = build(Mode::Int, Backbone::Dhen, 1);
        let forward_order: Vec<f64> = exs.iter().take(6).map(|e| logit_of(&params, e)).collect();
        let mut reverse_order: Vec<f64> =
            exs.iter().take(6).rev().map(|e| logit_of(&params, e)).collect();
        reverse_order.reverse();
        assert_eq!(forward_order, reverse_order);
    }

    #[test]
    fn empty_history_is_handled_in_every_mode() {
        for mode in Mode::ALL {
            let (params, mut exs) = build(mode, Backbone::Dot, 1);
            exs[0].sequences[0].clear();
            let v = logit_of(&params, &exs[0]);
            assert!(v.is_finite(), "mode {mode}");
        }
    }

    #[test]
    fn config_validation_rejects_inconsistent_settings() {
        let (gen, config) = desk_schema_config();
        let schema = gen.schema();
        let bad_cls = ModelConfig { c_cls: 3, n_sum: 2, ..config.clone() };
        assert!(bad_cls.validate(&schema).is_err());
        let bad_heads = ModelConfig { heads: 3, ..config.clone() };
        assert!(bad_heads.validate(&schema).is_err());
        let bad_nsum = ModelConfig { n_sum: 9, c_cls: 9, ..config.clone() };
        assert!(bad_nsum.validate(&schema).is_err());
        let bad_sigma = ModelConfig { gating_sigma: Activation::Relu, ..config.clone() };
        assert!(bad_sigma.validate(&schema).is_err());
        assert!(config.validate(&schema).is_ok());
    }
}
