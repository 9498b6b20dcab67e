//! Flat `key = value` run configuration.
//!
//! One namespace covers data generation, model shape and training
//! hyperparameters. Every key has a default, unknown keys are rejected,
//! and [`RunConfig::snapshot`] emits a canonical listing that parses back
//! to an identical configuration. Resolution order is defaults, then the
//! config file, then the `INTERFORMER_OUT_DIR` environment variable, then
//! command-line overrides.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use interformer_core::data::GenConfig;
use interformer_core::model::ModelConfig;
use interformer_core::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Optional CSV to train on instead of generating data. The file must
    /// match the schema implied by the generation keys.
    pub data: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            gen: GenConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
            out_dir: PathBuf::from("out"),
            data: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| format!("bad value for '{key}': {e}"))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, String> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn render_list(list: &[usize]) -> String {
    list.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one key. The error string is user-facing; the caller decides
    /// whether it is a usage error or a file error.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "examples" => self.gen.num_examples = parse(key, value)?,
            "users" => self.gen.num_users = parse(key, value)?,
            "dense_count" => self.gen.dense_count = parse(key, value)?,
            "sparse_vocabs" => self.gen.sparse_vocabs = parse_list(key, value)?,
            "seq_count" => self.gen.seq_count = parse(key, value)?,
            "seq_len" => self.gen.max_seq_len = parse(key, value)?,
            "embedding_dim" => self.gen.embedding_dim = parse(key, value)?,
            "target_ctr" => self.gen.target_ctr = parse(key, value)?,
            "dense_weight" => self.gen.dense_weight = parse(key, value)?,
            "sparse_weight" => self.gen.sparse_weight = parse(key, value)?,
            "seq_weight" => self.gen.seq_weight = parse(key, value)?,
            "hard_threshold" => self.gen.hard_threshold = parse(key, value)?,
            "test_fraction" => self.gen.test_fraction = parse(key, value)?,
            "layers" => self.model.layers = parse(key, value)?,
            "heads" => self.model.heads = parse(key, value)?,
            "backbone" => self.model.backbone = parse(key, value)?,
            "mode" => self.model.mode = parse(key, value)?,
            "c_cls" => self.model.c_cls = parse(key, value)?,
            "k_pma" => self.model.k_pma = parse(key, value)?,
            "k_recent" => self.model.k_recent = parse(key, value)?,
            "n_sum" => self.model.n_sum = parse(key, value)?,
            "head_hidden" => self.model.head_hidden = parse_list(key, value)?,
            "interaction_hidden" => self.model.interaction_hidden = parse(key, value)?,
            "pffn_hidden" => self.model.pffn_hidden = parse(key, value)?,
            "mask_hidden" => self.model.mask_hidden = parse(key, value)?,
            "gate_hidden" => self.model.gate_hidden = parse(key, value)?,
            "activation" => self.model.activation = parse(key, value)?,
            "gating_sigma" => self.model.gating_sigma = parse(key, value)?,
            "rope_base" => self.model.rope_base = parse(key, value)?,
            "ln_eps" => self.model.ln_eps = parse(key, value)?,
            "fm_rank" => self.model.fm_rank = parse(key, value)?,
            "dcn_depth" => self.model.dcn_depth = parse(key, value)?,
            "dcn_rank" => self.model.dcn_rank = parse(key, value)?,
            "dhen_depth" => self.model.dhen_depth = parse(key, value)?,
            "lr" => self.train.lr = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "epochs" => self.train.max_epochs = parse(key, value)?,
            "patience" => self.train.patience = parse(key, value)?,
            "lr_decay" => self.train.lr_decay = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "data" => self.data = Some(PathBuf::from(value)),
            _ => return Err(format!("unknown config key '{key}'")),
        }
        Ok(())
    }

    /// Applies a `key = value` file on top of the current values. Blank
    /// lines and `#` comments are skipped.
    pub fn apply_file_text(&mut self, text: &str) -> Result<(), String> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected 'key = value'", idx + 1))?;
            self.apply(key.trim(), value.trim())
                .map_err(|e| format!("line {}: {e}", idx + 1))?;
        }
        Ok(())
    }

    /// Canonical listing of every key. Floats use shortest-roundtrip
    /// formatting, so parsing the snapshot reproduces this config exactly.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        let g = &self.gen;
        let m = &self.model;
        let t = &self.train;
        let _ = writeln!(s, "examples = {}", g.num_examples);
        let _ = writeln!(s, "users = {}", g.num_users);
        let _ = writeln!(s, "dense_count = {}", g.dense_count);
        let _ = writeln!(s, "sparse_vocabs = {}", render_list(&g.sparse_vocabs));
        let _ = writeln!(s, "seq_count = {}", g.seq_count);
        let _ = writeln!(s, "seq_len = {}", g.max_seq_len);
        let _ = writeln!(s, "embedding_dim = {}", g.embedding_dim);
        let _ = writeln!(s, "target_ctr = {}", g.target_ctr);
        let _ = writeln!(s, "dense_weight = {}", g.dense_weight);
        let _ = writeln!(s, "sparse_weight = {}", g.sparse_weight);
        let _ = writeln!(s, "seq_weight = {}", g.seq_weight);
        let _ = writeln!(s, "hard_threshold = {}", g.hard_threshold);
        let _ = writeln!(s, "test_fraction = {}", g.test_fraction);
        let _ = writeln!(s, "layers = {}", m.layers);
        let _ = writeln!(s, "heads = {}", m.heads);
        let _ = writeln!(s, "backbone = {}", m.backbone);
        let _ = writeln!(s, "mode = {}", m.mode);
        let _ = writeln!(s, "c_cls = {}", m.c_cls);
        let _ = writeln!(s, "k_pma = {}", m.k_pma);
        let _ = writeln!(s, "k_recent = {}", m.k_recent);
        let _ = writeln!(s, "n_sum = {}", m.n_sum);
        let _ = writeln!(s, "head_hidden = {}", render_list(&m.head_hidden));
        let _ = writeln!(s, "interaction_hidden = {}", m.interaction_hidden);
        let _ = writeln!(s, "pffn_hidden = {}", m.pffn_hidden);
        let _ = writeln!(s, "mask_hidden = {}", m.mask_hidden);
        let _ = writeln!(s, "gate_hidden = {}", m.gate_hidden);
        let _ = writeln!(s, "activation = {}", m.activation);
        let _ = writeln!(s, "gating_sigma = {}", m.gating_sigma);
        let _ = writeln!(s, "rope_base = {}", m.rope_base);
        let _ = writeln!(s, "ln_eps = {}", m.ln_eps);
        let _ = writeln!(s, "fm_rank = {}", m.fm_rank);
        let _ = writeln!(s, "dcn_depth = {}", m.dcn_depth);
        let _ = writeln!(s, "dcn_rank = {}", m.dcn_rank);
        let _ = writeln!(s, "dhen_depth = {}", m.dhen_depth);
        let _ = writeln!(s, "lr = {}", t.lr);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "epochs = {}", t.max_epochs);
        let _ = writeln!(s, "patience = {}", t.patience);
        let _ = writeln!(s, "lr_decay = {}", t.lr_decay);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        if let Some(d) = &self.data {
            let _ = writeln!(s, "data = {}", d.display());
        }
        s
    }
}
