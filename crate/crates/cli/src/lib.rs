//! Command-line entry point: data generation, training, evaluation,
//! ablation sweeps, gradient checks and report rendering.
//!
//! Every subcommand is deterministic given (config, seed). A run
//! directory holds `config.snapshot` (the resolved configuration),
//! `model.ifck` (the trained checkpoint), `metrics.csv` (the epoch log)
//! and `report.tsv` (plot-ready data). Exit codes: 0 success, 1 runtime
//! failure, 2 usage error.

mod config;

pub use config::RunConfig;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use interformer_core::checkpoint;
use interformer_core::data::{self, Dataset, RawExample, Split};
use interformer_core::error::Error;
use interformer_core::gradcheck;
use interformer_core::model::Mode;
use interformer_core::train::{self, SplitMetrics};

/// Environment variable overriding the output directory. Config files
/// rank below it, command-line flags above it.
pub const OUT_DIR_ENV: &str = "INTERFORMER_OUT_DIR";

const SNAPSHOT_FILE: &str = "config.snapshot";
const MODEL_FILE: &str = "model.ifck";
const METRICS_FILE: &str = "metrics.csv";
const REPORT_FILE: &str = "report.tsv";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, malformed config, unknown keys. Exit 2.
    Usage(String),
    /// Anything that went wrong while doing the work. Exit 1.
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult = Result<(), CliError>;

#[derive(Parser)]
#[command(
    name = "interformer",
    version,
    about = "Heterogeneous interaction learning for click-through-rate prediction"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file applied over built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set lr=0.02`. Repeatable; applied
    /// after the config file, before the dedicated flags.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory; also settable via INTERFORMER_OUT_DIR.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed for data generation, initialization and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and write it as CSV.
    GenData {
        /// Destination file; defaults to <out>/data.csv.
        #[arg(long, value_name = "PATH")]
        to: Option<PathBuf>,
    },
    /// Train a model; writes config.snapshot, model.ifck and metrics.csv.
    Train,
    /// Load a trained checkpoint and print its test metrics.
    Eval {
        /// Checkpoint path; defaults to <out>/model.ifck.
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
    },
    /// Train every conditioning mode on one shared dataset and write the
    /// comparison table to report.tsv.
    Ablate,
    /// Finite-difference verification of every gradient; exits 1 on any
    /// failure.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = gradcheck::DEFAULT_STEP)]
        step: f64,
        #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
    /// Render metrics.csv into plot-ready TSV series.
    Report,
}

/// Parses argv and executes. Returns the process exit code instead of
/// exiting so tests can call it in-process.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: &Cli) -> CliResult {
    // `eval` and `report` default to the configuration the training run
    // snapshotted into the output directory.
    let reads_snapshot = matches!(cli.command, Command::Eval { .. } | Command::Report);
    let cfg = resolve(&cli.common, reads_snapshot)?;
    match &cli.command {
        Command::GenData { to } => cmd_gen_data(&cfg, to.as_deref()),
        Command::Train => cmd_train(&cfg),
        Command::Eval { model } => cmd_eval(&cfg, model.as_deref()),
        Command::Ablate => cmd_ablate(&cfg),
        Command::Gradcheck { seeds, step, tolerance } => cmd_gradcheck(*seeds, *step, *tolerance),
        Command::Report => cmd_report(&cfg),
    }
}

fn apply_overrides(cfg: &mut RunConfig, common: &Common) -> CliResult {
    if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
        cfg.out_dir = PathBuf::from(dir);
    }
    for pair in &common.set {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got '{pair}'")))?;
        cfg.apply(key.trim(), value.trim()).map_err(CliError::Usage)?;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(())
}

/// Builds the effective configuration: defaults, then the config file
/// (or, for snapshot-reading commands, the output directory's
/// `config.snapshot`), then environment and flags.
fn resolve(common: &Common, prefer_snapshot: bool) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Runtime(Error::io(path.display().to_string(), e)))?;
        cfg.apply_file_text(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    }
    apply_overrides(&mut cfg, common)?;

    if prefer_snapshot && common.config.is_none() {
        let snap = cfg.out_dir.join(SNAPSHOT_FILE);
        if snap.exists() {
            let text = std::fs::read_to_string(&snap)
                .map_err(|e| CliError::Runtime(Error::io(snap.display().to_string(), e)))?;
            let mut from_snap = RunConfig::default();
            from_snap
                .apply_file_text(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", snap.display())))?;
            // Flags still win over the snapshot.
            apply_overrides(&mut from_snap, common)?;
            cfg = from_snap;
        }
    }
    Ok(cfg)
}

fn write_file(path: &Path, content: &str) -> CliResult {
    std::fs::write(path, content)
        .map_err(|e| CliError::Runtime(Error::io(path.display().to_string(), e)))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(Error::io(path.display().to_string(), e)))
}

fn ensure_out_dir(cfg: &RunConfig) -> CliResult {
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::Runtime(Error::io(cfg.out_dir.display().to_string(), e)))?;
    Ok(())
}

/// The dataset every training-like command works on: an external CSV when
/// `data` is set, otherwise the synthetic generator.
fn load_or_generate(cfg: &RunConfig) -> Result<Dataset, CliError> {
    match &cfg.data {
        Some(path) => {
            let outcome = data::load_csv(path, &cfg.gen.schema())?;
            if !outcome.bad_rows.is_empty() {
                eprintln!(
                    "warning: skipped {} malformed row(s), first at line {}",
                    outcome.bad_rows.len(),
                    outcome.bad_rows[0].line
                );
            }
            outcome.dataset.validate()?;
            Ok(outcome.dataset)
        }
        None => Ok(data::generate_synthetic(&cfg.gen, cfg.seed)?),
    }
}

fn print_metrics(m: &SplitMetrics) {
    println!("test auc     {}", m.auc);
    println!("test gauc    {}", m.gauc);
    println!("test logloss {}", m.loss);
    println!("test ne      {}", m.ne);
}

fn cmd_gen_data(cfg: &RunConfig, to: Option<&Path>) -> CliResult {
    ensure_out_dir(cfg)?;
    let ds = load_or_generate(cfg)?;
    let path = to.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.join("data.csv"));
    ds.save_csv(&path)?;
    let positives = ds.examples.iter().filter(|e| e.label == 1).count();
    println!("wrote {}", path.display());
    println!("examples {}", ds.examples.len());
    println!("positive_rate {}", positives as f64 / ds.examples.len() as f64);
    println!("sha256 {}", ds.sha256_hex());
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> CliResult {
    ensure_out_dir(cfg)?;
    let ds = load_or_generate(cfg)?;
    let (params, report) = train::train(&ds, &cfg.model, &cfg.train, cfg.seed)?;
    write_file(&cfg.out_dir.join(SNAPSHOT_FILE), &cfg.snapshot())?;
    checkpoint::save(&params, cfg.out_dir.join(MODEL_FILE))?;
    write_file(&cfg.out_dir.join(METRICS_FILE), &report.metrics_csv())?;
    println!("epochs {}", report.rows.len());
    println!("best_epoch {}", report.best_epoch);
    println!("stop {}", report.stop);
    print_metrics(&report.best_test);
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, model: Option<&Path>) -> CliResult {
    let path = model.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.join(MODEL_FILE));
    let params = verified_load(&path)?;
    let ds = load_or_generate(cfg)?;
    if ds.schema != params.schema {
        return Err(CliError::Runtime(Error::config(
            "checkpoint schema does not match the configured dataset",
        )));
    }
    let metrics = train::evaluate(&params, &ds, &ds.indices_of(Split::Test))?;
    print_metrics(&metrics);
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig) -> CliResult {
    ensure_out_dir(cfg)?;
    let ds = load_or_generate(cfg)?;
    let mut table = String::new();
    let _ = writeln!(table, "# dataset_sha256\t{}", ds.sha256_hex());
    let _ = writeln!(table, "# seed\t{}", cfg.seed);
    let _ = writeln!(table, "mode\tauc\tgauc\tlogloss\tne");
    for mode in Mode::ALL {
        let mut model_cfg = cfg.model.clone();
        model_cfg.mode = mode;
        let (_, report) = train::train(&ds, &model_cfg, &cfg.train, cfg.seed)?;
        let m = report.best_test;
        let _ = writeln!(table, "{mode}\t{}\t{}\t{}\t{}", m.auc, m.gauc, m.loss, m.ne);
    }
    write_file(&cfg.out_dir.join(SNAPSHOT_FILE), &cfg.snapshot())?;
    write_file(&cfg.out_dir.join(REPORT_FILE), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_gradcheck(seeds: u64, step: f64, tolerance: f64) -> CliResult {
    if seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let report = gradcheck::run_suite(seeds, step, tolerance)?;
    print!("{}", report.render());
    if report.all_passed() {
        println!("all {} checks passed", report.outcomes.len());
        Ok(())
    } else {
        Err(CliError::Runtime(Error::config("gradient check failed")))
    }
}

/// Turns the epoch log into long-format TSV, one row per (series, epoch)
/// point: `train.auc  3  0.91...`.
fn cmd_report(cfg: &RunConfig) -> CliResult {
    let metrics_path = cfg.out_dir.join(METRICS_FILE);
    if !metrics_path.exists() {
        return Err(CliError::Runtime(Error::config(format!(
            "no {} in {}; run train first",
            METRICS_FILE,
            cfg.out_dir.display()
        ))));
    }
    let text = read_file(&metrics_path)?;
    let mut out = String::from("series\tepoch\tvalue\n");
    let mut rows = 0;
    for (idx, line) in text.lines().enumerate().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 6 {
            return Err(CliError::Runtime(Error::data(
                idx + 1,
                format!("expected 6 columns in {}", metrics_path.display()),
            )));
        }
        let (epoch, split) = (cells[0], cells[1]);
        for (name, value) in [("loss", cells[2]), ("auc", cells[3]), ("gauc", cells[4]), ("ne", cells[5])]
        {
            let _ = writeln!(out, "{split}.{name}\t{epoch}\t{value}");
            rows += 1;
        }
    }
    let report_path = cfg.out_dir.join(REPORT_FILE);
    write_file(&report_path, &out)?;
    println!("wrote {} ({rows} points)", report_path.display());
    Ok(())
}

/// Loads a checkpoint and proves the container is stable: re-serializing
/// the loaded model must reproduce the file byte for byte.
fn verified_load(path: &Path) -> Result<interformer_core::model::ModelParams, CliError> {
    let bytes =
        std::fs::read(path).map_err(|e| CliError::Runtime(Error::io(path.display().to_string(), e)))?;
    let params = checkpoint::from_bytes(&bytes)?;
    let again = checkpoint::to_bytes(&params)?;
    if bytes != again {
        return Err(CliError::Runtime(Error::config(
            "checkpoint does not re-serialize byte-identically",
        )));
    }
    Ok(params)
}

/// Save-load-save stability plus bit-identical predictions of the
/// reloaded model on a deterministic probe batch.
pub fn checkpoint_roundtrip(path: &Path) -> Result<(), Error> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let params = checkpoint::from_bytes(&bytes)?;
    let again = checkpoint::to_bytes(&params)?;
    if bytes != again {
        return Err(Error::config("checkpoint does not re-serialize byte-identically"));
    }
    let reloaded = checkpoint::from_bytes(&again)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xB0B);
    for i in 0..8u64 {
        let ex = probe_example(&params.schema, i, &mut rng);
        let a = params.predict(&ex)?;
        let b = reloaded.predict(&ex)?;
        if a.to_bits() != b.to_bits() {
            return Err(Error::config("reloaded model disagrees on a probe example"));
        }
    }
    Ok(())
}

fn probe_example(
    schema: &interformer_core::data::FeatureSchema,
    user: u64,
    rng: &mut ChaCha8Rng,
) -> RawExample {
    let dense = (0..schema.dense_count).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let sparse = schema.sparse.iter().map(|s| rng.gen_range(0..s.vocab)).collect();
    let sequences = schema
        .sequences
        .iter()
        .map(|s| {
            let len = rng.gen_range(1..=schema.max_seq_len);
            (0..len).map(|_| rng.gen_range(0..s.vocab)).collect()
        })
        .collect();
    RawExample { label: (user % 2) as u8, user_id: user, dense, sparse, sequences }
}
