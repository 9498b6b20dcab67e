//! Dataset schema, synthetic generation, and CSV persistence.
//!
//! Raw examples hold a binary label, a user id, a dense vector, one index
//! per sparse feature, and one index list per sequence feature. Sequences
//! are stored oldest-first and truncated to the `max_seq_len` most recent
//! tokens. The synthetic generator plants signal in both the static
//! features and the history (how often the target category was recently
//! interacted with), so models that exchange information between the two
//! sides have something real to gain.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One sparse-categorical feature: a name and its vocabulary size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparseSpec {
    pub name: String,
    pub vocab: usize,
}

/// One behavior-sequence feature over its own vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub name: String,
    pub vocab: usize,
}

/// Shape of the raw feature space. All sequence features share one maximum
/// length; shorter histories are left-padded at embedding time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub dense_count: usize,
    pub sparse: Vec<SparseSpec>,
    pub sequences: Vec<SequenceSpec>,
    pub max_seq_len: usize,
    pub embedding_dim: usize,
}

impl FeatureSchema {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::config("embedding_dim must be at least 1"));
        }
        if self.max_seq_len == 0 {
            return Err(Error::config("max_seq_len must be at least 1"));
        }
        if self.sequences.is_empty() {
            return Err(Error::config("at least one sequence feature is required"));
        }
        for s in &self.sparse {
            if s.vocab == 0 {
                return Err(Error::ingest(&s.name, "vocabulary must be non-empty"));
            }
        }
        for s in &self.sequences {
            if s.vocab == 0 {
                return Err(Error::ingest(&s.name, "vocabulary must be non-empty"));
            }
        }
        Ok(())
    }

    /// Column count of the non-sequence embedding matrix: one dense block
    /// (when dense features exist) plus one column per sparse feature.
    pub fn nonseq_columns(&self) -> usize {
        usize::from(self.dense_count > 0) + self.sparse.len()
    }
}

/// One raw record. Sequence lists are oldest-first; the last entry is the
/// most recent interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct RawExample {
    pub label: u8,
    pub user_id: u64,
    pub dense: Vec<f64>,
    pub sparse: Vec<usize>,
    pub sequences: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// An ordered collection of examples with per-example split tags.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub examples: Vec<RawExample>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.examples.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Mean train label; the normalizer for normalized entropy. Errors when
    /// the train split is single-class, which would make NE undefined.
    pub fn background_ctr(&self) -> Result<f64> {
        let train = self.indices_of(Split::Train);
        if train.is_empty() {
            return Err(Error::config("dataset has no train examples"));
        }
        let positives = train.iter().filter(|&&i| self.examples[i].label == 1).count();
        let ctr = positives as f64 / train.len() as f64;
        if ctr <= 0.0 || ctr >= 1.0 {
            return Err(Error::UndefinedMetric {
                metric: "normalized entropy",
                reason: format!("train split is single-class (ctr {ctr})"),
            });
        }
        Ok(ctr)
    }

    /// Structural check of every example against the schema.
    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        if self.examples.len() != self.splits.len() {
            return Err(Error::config("split tags do not cover every example"));
        }
        for (i, ex) in self.examples.iter().enumerate() {
            validate_example(&self.schema, ex).map_err(|e| match e {
                Error::Ingest { feature, reason } => {
                    Error::data(i + 2, format!("feature '{feature}': {reason}"))
                }
                other => other,
            })?;
        }
        Ok(())
    }

    /// Canonical CSV serialization; the basis for on-disk files and the
    /// dataset fingerprint.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        out.push_str("label,user_id");
        for i in 0..self.schema.dense_count {
            let _ = write!(out, ",dense_{i}");
        }
        for s in &self.schema.sparse {
            let _ = write!(out, ",sparse_{}", s.name);
        }
        for s in &self.schema.sequences {
            let _ = write!(out, ",seq_{}", s.name);
        }
        out.push_str(",split\n");
        for (ex, split) in self.examples.iter().zip(&self.splits) {
            let _ = write!(out, "{},{}", ex.label, ex.user_id);
            for v in &ex.dense {
                let _ = write!(out, ",{v}");
            }
            for v in &ex.sparse {
                let _ = write!(out, ",{v}");
            }
            for seq in &ex.sequences {
                out.push(',');
                for (j, tok) in seq.iter().enumerate() {
                    if j > 0 {
                        out.push('|');
                    }
                    let _ = write!(out, "{tok}");
                }
            }
            let tag = match split {
                Split::Train => "train",
                Split::Test => "test",
            };
            let _ = writeln!(out, ",{tag}");
        }
        out
    }

    /// SHA-256 of the canonical CSV bytes, hex-encoded. Identifies a
    /// dataset in reports.
    pub fn sha256_hex(&self) -> String {
        let digest = Sha256::digest(self.to_csv_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }
}

fn validate_example(schema: &FeatureSchema, ex: &RawExample) -> Result<()> {
    if ex.label > 1 {
        return Err(Error::ingest("label", format!("must be 0 or 1, got {}", ex.label)));
    }
    if ex.dense.len() != schema.dense_count {
        return Err(Error::ingest(
            "dense",
            format!("expected {} values, got {}", schema.dense_count, ex.dense.len()),
        ));
    }
    if ex.dense.iter().any(|v| !v.is_finite()) {
        return Err(Error::ingest("dense", "non-finite value"));
    }
    if ex.sparse.len() != schema.sparse.len() {
        return Err(Error::ingest(
            "sparse",
            format!("expected {} indices, got {}", schema.sparse.len(), ex.sparse.len()),
        ));
    }
    for (spec, &idx) in schema.sparse.iter().zip(&ex.sparse) {
        if idx >= spec.vocab {
            return Err(Error::ingest(
                &spec.name,
                format!("index {idx} outside vocabulary of {}", spec.vocab),
            ));
        }
    }
    if ex.sequences.len() != schema.sequences.len() {
        return Err(Error::ingest(
            "sequences",
            format!("expected {} lists, got {}", schema.sequences.len(), ex.sequences.len()),
        ));
    }
    for (spec, seq) in schema.sequences.iter().zip(&ex.sequences) {
        if seq.len() > schema.max_seq_len {
            return Err(Error::ingest(
                &spec.name,
                format!("length {} exceeds the maximum {}", seq.len(), schema.max_seq_len),
            ));
        }
        for &tok in seq {
            if tok >= spec.vocab {
                return Err(Error::ingest(
                    &spec.name,
                    format!("token {tok} outside vocabulary of {}", spec.vocab),
                ));
            }
        }
    }
    Ok(())
}

/// Rows that failed to parse, with 1-based file line numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct BadRow {
    pub line: usize,
    pub reason: String,
}

/// A loaded dataset plus the rows that were skipped.
#[derive(Debug)]
pub struct LoadOutcome {
    pub dataset: Dataset,
    pub bad_rows: Vec<BadRow>,
}

/// Parses a CSV file against the schema. The header must contain exactly
/// the schema's columns (a trailing `split` column is optional; without it
/// the leading 85% of rows become train). Malformed rows are skipped and
/// reported, not fatal.
pub fn load_csv(path: &Path, schema: &FeatureSchema) -> Result<LoadOutcome> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    load_csv_str(&text, schema)
}

pub fn load_csv_str(text: &str, schema: &FeatureSchema) -> Result<LoadOutcome> {
    schema.validate()?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::data(1, "empty file"))?;

    let mut expected = vec!["label".to_string(), "user_id".to_string()];
    for i in 0..schema.dense_count {
        expected.push(format!("dense_{i}"));
    }
    for s in &schema.sparse {
        expected.push(format!("sparse_{}", s.name));
    }
    for s in &schema.sequences {
        expected.push(format!("seq_{}", s.name));
    }
    let got: Vec<&str> = header.split(',').collect();
    let has_split = got.last() == Some(&"split");
    let body = if has_split { &got[..got.len() - 1] } else { &got[..] };
    if body.len() != expected.len() || body.iter().zip(&expected).any(|(a, b)| a != b) {
        return Err(Error::data(
            1,
            format!("header mismatch: expected '{}', got '{header}'", expected.join(",")),
        ));
    }

    let mut examples = Vec::new();
    let mut splits = Vec::new();
    let mut bad_rows = Vec::new();
    for (zero_idx, line) in lines.enumerate() {
        let line_no = zero_idx + 2;
        if line.is_empty() {
            continue;
        }
        match parse_row(line, schema, has_split) {
            Ok((ex, split)) => {
                examples.push(ex);
                splits.push(split);
            }
            Err(reason) => bad_rows.push(BadRow { line: line_no, reason }),
        }
    }
    let splits = if has_split {
        splits.into_iter().map(|s| s.unwrap()).collect()
    } else {
        fraction_split(examples.len(), 0.15)
    };
    let dataset = Dataset { schema: schema.clone(), examples, splits };
    Ok(LoadOutcome { dataset, bad_rows })
}

fn parse_row(
    line: &str,
    schema: &FeatureSchema,
    has_split: bool,
) -> std::result::Result<(RawExample, Option<Split>), String> {
    let cells: Vec<&str> = line.split(',').collect();
    let want = 2 + schema.dense_count + schema.sparse.len() + schema.sequences.len()
        + usize::from(has_split);
    if cells.len() != want {
        return Err(format!("expected {want} cells, got {}", cells.len()));
    }
    let mut it = cells.into_iter();
    let label: u8 = it.next().unwrap().parse().map_err(|_| "label is not an integer")?;
    if label > 1 {
        return Err(format!("label must be 0 or 1, got {label}"));
    }
    let user_id: u64 = it.next().unwrap().parse().map_err(|_| "user_id is not an integer")?;
    let mut dense = Vec::with_capacity(schema.dense_count);
    for i in 0..schema.dense_count {
        let v: f64 = it
            .next()
            .unwrap()
            .parse()
            .map_err(|_| format!("dense_{i} is not a number"))?;
        if !v.is_finite() {
            return Err(format!("dense_{i} is not finite"));
        }
        dense.push(v);
    }
    let mut sparse = Vec::with_capacity(schema.sparse.len());
    for spec in &schema.sparse {
        let idx: usize = it
            .next()
            .unwrap()
            .parse()
            .map_err(|_| format!("sparse_{} is not an index", spec.name))?;
        if idx >= spec.vocab {
            return Err(format!(
                "sparse_{}: index {idx} outside vocabulary of {}",
                spec.name, spec.vocab
            ));
        }
        sparse.push(idx);
    }
    let mut sequences = Vec::with_capacity(schema.sequences.len());
    for spec in &schema.sequences {
        let cell = it.next().unwrap();
        let mut seq = Vec::new();
        if !cell.is_empty() {
            for part in cell.split('|') {
                let tok: usize = part
                    .parse()
                    .map_err(|_| format!("seq_{}: '{part}' is not an index", spec.name))?;
                if tok >= spec.vocab {
                    return Err(format!(
                        "seq_{}: token {tok} outside vocabulary of {}",
                        spec.name, spec.vocab
                    ));
                }
                seq.push(tok);
            }
        }
        // Keep the most recent tokens when the history overflows.
        if seq.len() > schema.max_seq_len {
            seq.drain(..seq.len() - schema.max_seq_len);
        }
        sequences.push(seq);
    }
    let split = if has_split {
        match it.next().unwrap() {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            other => return Err(format!("unknown split tag '{other}'")),
        }
    } else {
        None
    };
    Ok((RawExample { label, user_id, dense, sparse, sequences }, split))
}

/// Deterministic interleaved split: roughly every `1/test_fraction`-th
/// example is tagged test, giving an even spread without randomness.
pub fn fraction_split(count: usize, test_fraction: f64) -> Vec<Split> {
    (0..count)
        .map(|i| {
            let before = (i as f64 * test_fraction).floor();
            let after = ((i + 1) as f64 * test_fraction).floor();
            if after > before {
                Split::Test
            } else {
                Split::Train
            }
        })
        .collect()
}

/// Controls for the synthetic generator. The label score mixes three
/// signal families; `hard_threshold` switches from Bernoulli sampling to a
/// deterministic quantile cut, producing separable labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub num_examples: usize,
    pub num_users: usize,
    pub dense_count: usize,
    /// Vocabulary sizes per sparse feature. The first feature is the
    /// target category whose history matches drive the sequence signal.
    pub sparse_vocabs: Vec<usize>,
    /// Number of sequence features; the first shares the target-category
    /// vocabulary, the rest are uniform noise.
    pub seq_count: usize,
    pub max_seq_len: usize,
    pub embedding_dim: usize,
    pub target_ctr: f64,
    pub dense_weight: f64,
    pub sparse_weight: f64,
    pub seq_weight: f64,
    pub hard_threshold: bool,
    pub test_fraction: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_examples: 20_000,
            num_users: 64,
            dense_count: 3,
            sparse_vocabs: vec![24, 16, 16, 12],
            seq_count: 1,
            max_seq_len: 10,
            embedding_dim: 8,
            target_ctr: 0.3,
            dense_weight: 1.0,
            sparse_weight: 1.0,
            seq_weight: 1.5,
            hard_threshold: false,
            test_fraction: 0.15,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_examples < 2 {
            return Err(Error::config("need at least 2 examples"));
        }
        if self.num_users == 0 {
            return Err(Error::config("need at least 1 user"));
        }
        if self.sparse_vocabs.is_empty() || self.seq_count == 0 {
            return Err(Error::config("need at least one sparse and one sequence feature"));
        }
        if self.sparse_vocabs.iter().any(|&v| v < 2) {
            return Err(Error::config("sparse vocabularies need at least 2 entries"));
        }
        if self.max_seq_len == 0 || self.embedding_dim == 0 {
            return Err(Error::config("max_seq_len and embedding_dim must be at least 1"));
        }
        if !(self.target_ctr > 0.0 && self.target_ctr < 1.0) {
            return Err(Error::config("target_ctr must lie strictly inside (0,1)"));
        }
        if self.dense_weight == 0.0 && self.sparse_weight == 0.0 && self.seq_weight == 0.0 {
            return Err(Error::config("all signal weights are zero; labels would be noise"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("test_fraction must lie strictly inside (0,1)"));
        }
        Ok(())
    }

    pub fn schema(&self) -> FeatureSchema {
        let sparse = self
            .sparse_vocabs
            .iter()
            .enumerate()
            .map(|(i, &vocab)| SparseSpec {
                name: if i == 0 { "cat".to_string() } else { format!("ctx{i}") },
                vocab,
            })
            .collect();
        let sequences = (0..self.seq_count)
            .map(|i| SequenceSpec {
                name: if i == 0 { "hist".to_string() } else { format!("aux{i}") },
                vocab: if i == 0 { self.sparse_vocabs[0] } else { 32 },
            })
            .collect();
        FeatureSchema {
            dense_count: self.dense_count,
            sparse,
            sequences,
            max_seq_len: self.max_seq_len,
            embedding_dim: self.embedding_dim,
        }
    }
}

/// Tokens at the end of a history reflect the user's current interest;
/// earlier tokens follow a stale decoy interest. Only this many trailing
/// tokens drive the label, so order-blind pooling of the whole history
/// sees the signal diluted by the decoy block.
const RECENT_WINDOW: usize = 3;

/// Deterministic synthetic dataset. The label score is
/// `dense_weight * <w, dense> + sparse_weight * quality(category)
///  + seq_weight * (recent-history match fraction, centered)`,
/// calibrated so the empirical positive rate hits `target_ctr`. Each user
/// has a favorite category that biases both their history and the
/// presented category, giving per-user structure for grouped metrics.
pub fn generate_synthetic(config: &GenConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let schema = config.schema();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let cat_vocab = config.sparse_vocabs[0];
    let favorites: Vec<usize> =
        (0..config.num_users).map(|_| rng.gen_range(0..cat_vocab)).collect();
    // Per-category base appeal, the learnable sparse signal.
    let quality: Vec<f64> = (0..cat_vocab).map(|_| normal.sample(&mut rng)).collect();
    let dense_w: Vec<f64> = (0..config.dense_count).map(|_| normal.sample(&mut rng)).collect();

    let mut examples = Vec::with_capacity(config.num_examples);
    let mut scores = Vec::with_capacity(config.num_examples);
    for _ in 0..config.num_examples {
        let user = rng.gen_range(0..config.num_users) as u64;
        let fav = favorites[user as usize];

        let dense: Vec<f64> = (0..config.dense_count).map(|_| normal.sample(&mut rng)).collect();
        // The user's interest drifted from `decoy` to `fav`; the presented
        // category is often one of the two, so telling stale interest from
        // current interest is exactly what the label rewards.
        let decoy = rng.gen_range(0..cat_vocab);
        let cat = match rng.gen_range(0..4u8) {
            0 | 1 => fav,
            2 => decoy,
            _ => rng.gen_range(0..cat_vocab),
        };
        let mut sparse = Vec::with_capacity(config.sparse_vocabs.len());
        sparse.push(cat);
        for &vocab in &config.sparse_vocabs[1..] {
            sparse.push(rng.gen_range(0..vocab));
        }

        let mut sequences = Vec::with_capacity(config.seq_count);
        let hist_len = rng.gen_range(1..=config.max_seq_len);
        let recent = RECENT_WINDOW.min(hist_len);
        let hist: Vec<usize> = (0..hist_len)
            .map(|i| {
                let interest = if i >= hist_len - recent { fav } else { decoy };
                if rng.gen_bool(0.6) { interest } else { rng.gen_range(0..cat_vocab) }
            })
            .collect();
        let match_fraction =
            hist[hist_len - recent..].iter().filter(|&&t| t == cat).count() as f64
                / recent as f64;
        sequences.push(hist);
        for spec in &schema.sequences[1..] {
            let len = rng.gen_range(1..=config.max_seq_len);
            sequences.push((0..len).map(|_| rng.gen_range(0..spec.vocab)).collect());
        }

        let dense_signal: f64 =
            dense.iter().zip(&dense_w).map(|(x, w)| x * w).sum::<f64>()
                / (config.dense_count.max(1) as f64).sqrt();
        let sparse_signal = quality[cat];
        // History match runs 0..1; center near its blended expectation so
        // the weight controls spread, not offset.
        let seq_signal = match_fraction - 0.4;
        let score = config.dense_weight * dense_signal
            + config.sparse_weight * sparse_signal
            + config.seq_weight * seq_signal;
        scores.push(score);
        examples.push(RawExample { label: 0, user_id: user, dense, sparse, sequences });
    }

    if config.hard_threshold {
        // Quantile cut: exactly the top target_ctr fraction goes positive.
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let cut_idx = ((config.num_examples as f64) * (1.0 - config.target_ctr)) as usize;
        let threshold = sorted[cut_idx.min(config.num_examples - 1)];
        for (ex, &s) in examples.iter_mut().zip(&scores) {
            ex.label = u8::from(s > threshold);
        }
    } else {
        // Bisection on the intercept so the mean sigmoid matches the
        // target rate, then Bernoulli sampling.
        let mean_prob = |b: f64| -> f64 {
            scores.iter().map(|&s| crate::tensor::sigmoid(s + b)).sum::<f64>()
                / scores.len() as f64
        };
        let (mut lo, mut hi) = (-30.0, 30.0);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if mean_prob(mid) < config.target_ctr {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let bias = 0.5 * (lo + hi);
        for (ex, &s) in examples.iter_mut().zip(&scores) {
            let p = crate::tensor::sigmoid(s + bias);
            ex.label = u8::from(rng.gen_bool(p.clamp(1e-12, 1.0 - 1e-12)));
        }
    }

    let splits = fraction_split(examples.len(), config.test_fraction);
    let dataset = Dataset { schema, examples, splits };
    dataset.validate()?;
    Ok(dataset)
}
