//! Optimization and evaluation: bias-corrected Adam, the minibatch
//! training loop with plateau learning-rate decay and early stopping, and
//! the ranking/calibration metrics (AUC, user-weighted AUC, normalized
//! entropy).

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::nn::ParamSet;
use crate::tensor::{Graph, NodeId};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Per-parameter first/second moment accumulators and the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(set: &ParamSet) -> Self {
        AdamState { m: set.zero_grads(), v: set.zero_grads(), t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update, in place. A zero gradient leaves its
    /// parameter exactly unchanged (both moments stay zero).
    pub fn step(&mut self, set: &mut ParamSet, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::config(format!(
                "optimizer holds {} parameter slots but got {} gradients",
                self.m.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for i in 0..grads.len() {
            if grads[i].len() != self.m[i].len() {
                return Err(Error::config(format!(
                    "gradient {i} has {} entries but the parameter has {}",
                    grads[i].len(),
                    self.m[i].len()
                )));
            }
            let data = set.tensor_mut(i).data_mut();
            for (j, &g) in grads[i].iter().enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// `-(y ln p + (1-y) ln(1-p))` for a single clamped probability.
pub fn cross_entropy(y_hat: f64, y: u8) -> Result<f64> {
    match y {
        1 => Ok(-y_hat.ln()),
        0 => Ok(-(1.0 - y_hat).ln()),
        other => Err(Error::data(0, format!("label {other} outside {{0,1}}"))),
    }
}

/// Graph node for the same loss, differentiable through `prob`.
pub fn cross_entropy_node(g: &mut Graph, prob: NodeId, y: u8) -> Result<NodeId> {
    let inner = match y {
        1 => prob,
        0 => {
            let one = g.scalar(1.0)?;
            g.sub(one, prob)?
        }
        other => return Err(Error::data(0, format!("label {other} outside {{0,1}}"))),
    };
    let ln = g.ln(inner)?;
    g.scale(ln, -1.0)
}

fn check_metric_inputs(scores: &[f64], labels: &[u8], metric: &'static str) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::UndefinedMetric {
            metric,
            reason: format!("{} scores against {} labels", scores.len(), labels.len()),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::UndefinedMetric { metric, reason: "non-finite score".to_string() });
    }
    Ok(())
}

/// Probability that a uniformly random positive outranks a uniformly
/// random negative, ties counted half. Rank-statistic form, `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_metric_inputs(scores, labels, "auc")?;
    let n = scores.len();
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = n - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric {
            metric: "auc",
            reason: format!("{pos} positives and {neg} negatives"),
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));

    // Average rank within each tied block makes every tied positive-negative
    // pair contribute exactly one half.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Per-user AUC averaged with weights equal to each user's positive
/// count. Users without both classes are excluded; if none remain the
/// metric is undefined.
pub fn gauc(scores: &[f64], labels: &[u8], user_ids: &[u64]) -> Result<f64> {
    check_metric_inputs(scores, labels, "gauc")?;
    if user_ids.len() != scores.len() {
        return Err(Error::UndefinedMetric {
            metric: "gauc",
            reason: format!("{} user ids against {} scores", user_ids.len(), scores.len()),
        });
    }
    // BTreeMap fixes the accumulation order, keeping the result identical
    // across runs regardless of input permutation.
    let mut by_user: BTreeMap<u64, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for i in 0..scores.len() {
        let entry = by_user.entry(user_ids[i]).or_default();
        entry.0.push(scores[i]);
        entry.1.push(labels[i]);
    }
    let mut weighted = 0.0;
    let mut weight_sum = 0.0;
    for (s, l) in by_user.values() {
        let pos = l.iter().filter(|&&x| x == 1).count();
        if pos == 0 || pos == l.len() {
            continue;
        }
        weighted += pos as f64 * auc(s, l)?;
        weight_sum += pos as f64;
    }
    if weight_sum == 0.0 {
        return Err(Error::UndefinedMetric {
            metric: "gauc",
            reason: "no user has both a click and a non-click".to_string(),
        });
    }
    Ok(weighted / weight_sum)
}

/// LogLoss divided by the entropy of the background click rate `p`. A
/// model that always predicts `p` scores exactly 1.
pub fn normalized_entropy(logloss: f64, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::UndefinedMetric {
            metric: "normalized entropy",
            reason: format!("background rate {p} outside (0,1)"),
        });
    }
    Ok(logloss / -(p * p.ln() + (1.0 - p) * (1.0 - p).ln()))
}

/// Loss plus the three ranking/calibration metrics of one split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub loss: f64,
    pub auc: f64,
    pub gauc: f64,
    pub ne: f64,
}

/// Metrics from already-computed predictions. The normalized-entropy
/// background rate is the label mean of these examples.
pub fn metrics_from(preds: &[f64], labels: &[u8], users: &[u64]) -> Result<SplitMetrics> {
    if preds.is_empty() {
        return Err(Error::config("cannot compute metrics of an empty split"));
    }
    let mut loss_sum = 0.0;
    for (&p, &y) in preds.iter().zip(labels) {
        loss_sum += cross_entropy(p, y)?;
    }
    let loss = loss_sum / preds.len() as f64;
    let rate = labels.iter().filter(|&&y| y == 1).count() as f64 / labels.len() as f64;
    Ok(SplitMetrics {
        loss,
        auc: auc(preds, labels)?,
        gauc: gauc(preds, labels, users)?,
        ne: normalized_entropy(loss, rate)?,
    })
}

/// Runs the model over `indices` of `dataset` and computes the metrics.
pub fn evaluate(params: &ModelParams, dataset: &Dataset, indices: &[usize]) -> Result<SplitMetrics> {
    let mut preds = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    let mut users = Vec::with_capacity(indices.len());
    for &i in indices {
        let ex = &dataset.examples[i];
        preds.push(params.predict(ex)?);
        labels.push(ex.label);
        users.push(ex.user_id);
    }
    metrics_from(&preds, &labels, &users)
}

/// Training-loop hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Consecutive epochs without a test-AUC improvement before stopping.
    pub patience: usize,
    /// Multiplier applied to the learning rate on each non-improving epoch.
    pub lr_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 1e-2, batch_size: 256, max_epochs: 100, patience: 5, lr_decay: 0.5 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be finite and non-negative"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::config("batch_size, max_epochs and patience must be at least 1"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("lr_decay must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    /// Test AUC failed to improve for `patience` consecutive epochs.
    NoImprovement,
    ReachedMaxEpochs,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StopReason::NoImprovement => f.write_str("early stop (test auc plateau)"),
            StopReason::ReachedMaxEpochs => f.write_str("reached max epochs"),
        }
    }
}

/// One epoch of the log: train metrics are computed from the predictions
/// made during optimization (before each update), test metrics from a
/// dedicated pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train: SplitMetrics,
    pub test: SplitMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_test: SplitMetrics,
    pub stop: StopReason,
}

impl TrainReport {
    /// `epoch,split,loss,auc,gauc,ne` with one train and one test row per
    /// epoch. Plain `Display` float formatting round-trips exactly.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("epoch,split,loss,auc,gauc,ne\n");
        for row in &self.rows {
            for (split, m) in [("train", &row.train), ("test", &row.test)] {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    row.epoch, split, m.loss, m.auc, m.gauc, m.ne
                );
            }
        }
        out
    }
}

/// Minibatch training with Adam. Deterministic in `seed`, which drives
/// both parameter initialization and epoch shuffling. Returns the
/// parameters of the best test-AUC epoch, not the last one.
pub fn train(
    dataset: &Dataset,
    model_config: &ModelConfig,
    tc: &TrainConfig,
    seed: u64,
) -> Result<(ModelParams, TrainReport)> {
    tc.validate()?;
    let train_idx = dataset.indices_of(Split::Train);
    let test_idx = dataset.indices_of(Split::Test);
    if train_idx.is_empty() {
        return Err(Error::config("train split is empty"));
    }
    if test_idx.is_empty() {
        return Err(Error::config("test split is empty"));
    }
    dataset.background_ctr()?;

    let mut params = ModelParams::new(model_config.clone(), dataset.schema.clone(), seed)?;
    let mut adam = AdamState::new(&params.set);
    // Separate stream from parameter initialization.
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut lr = tc.lr;

    let mut rows = Vec::new();
    let mut best: Option<(f64, usize, ModelParams, SplitMetrics)> = None;
    let mut bad_epochs = 0;
    let mut stop = StopReason::ReachedMaxEpochs;

    let mut order = train_idx.clone();
    for epoch in 1..=tc.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut preds = Vec::with_capacity(order.len());
        let mut labels = Vec::with_capacity(order.len());
        let mut users = Vec::with_capacity(order.len());

        for batch in order.chunks(tc.batch_size) {
            let mut grads = params.set.zero_grads();
            for &i in batch {
                let ex = &dataset.examples[i];
                let mut g = Graph::new();
                let b = params.bind(&mut g);
                let fp = params.forward(&mut g, &b, ex)?;
                let loss = cross_entropy_node(&mut g, fp.prob, ex.label)?;
                g.backward(loss)?;
                b.accumulate_grads(&g, &mut grads);
                preds.push(g.value(fp.prob).item()?);
                labels.push(ex.label);
                users.push(ex.user_id);
            }
            let scale = 1.0 / batch.len() as f64;
            for gv in &mut grads {
                for v in gv.iter_mut() {
                    *v *= scale;
                }
            }
            adam.step(&mut params.set, &grads, lr)?;
        }
        params.set.check_finite()?;

        let train_metrics = metrics_from(&preds, &labels, &users)?;
        let test_metrics = evaluate(&params, dataset, &test_idx)?;
        rows.push(EpochRow { epoch, train: train_metrics, test: test_metrics });

        let improved = best.as_ref().map_or(true, |(b, ..)| test_metrics.auc > *b);
        if improved {
            best = Some((test_metrics.auc, epoch, params.clone(), test_metrics));
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            lr *= tc.lr_decay;
            if bad_epochs >= tc.patience {
                stop = StopReason::NoImprovement;
                break;
            }
        }
    }

    let (_, best_epoch, best_params, best_test) = best.expect("at least one epoch ran");
    Ok((best_params, TrainReport { rows, best_epoch, best_test, stop }))
}
