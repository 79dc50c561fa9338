//! Command-line surface: dataset IO, flat key=value config files, run
//! manifests, and the generate / train / eval / ablate / sweep commands.
//!
//! A run directory holds manifest.json, checkpoint, history.tsv,
//! metrics.tsv and groups.tsv; ablate adds ablation.tsv and mad.tsv,
//! sweep adds sensitivity.tsv. Reruns with an identical manifest produce
//! identical files.

use crate::data::{parse_alignment, parse_interactions, parse_statements};
use crate::eval::{density_group_eval, evaluate, groups_tsv, metrics_tsv, EvalReport};
use crate::synth::{generate, GeneratorConfig};
use crate::trainer::{
    forward_values, history_tsv, init_params, split_edges, train, Dataset, ModelState, Split,
    TrainingConfig,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const TAU_GRID: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 1.0];
pub const LAYER_GRID: [usize; 4] = [1, 2, 3, 4];
pub const LAMBDA1_GRID: [f64; 5] = [2e-2, 2e-3, 2e-4, 2e-5, 2e-6];
pub const LAMBDA2_GRID: [f64; 5] = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6];
pub const LR_GRID: [f64; 4] = [1e-3, 5e-4, 1e-4, 1e-5];

#[derive(Error, Debug)]
pub enum CliError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// Missing inputs and config mistakes exit 2, runtime failures 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingFile(_) | CliError::BadConfig(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "hyperrec", version, about = "Hypergraph recommender over hyper-relational knowledge graphs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a cluster-structured synthetic dataset.
    Generate(GenerateArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out test split.
    Eval(EvalArgs),
    /// Run the full model and the -SA / -DH / -SSL variants on shared seeds.
    Ablate(AblateArgs),
    /// Sensitivity sweep over the temperature and layer grids.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub users: usize,
    #[arg(long, default_value_t = 60)]
    pub items: usize,
    #[arg(long, default_value_t = 5)]
    pub clusters: usize,
    #[arg(long, default_value_t = 0.35)]
    pub p_in: f64,
    #[arg(long, default_value_t = 0.02)]
    pub p_out: f64,
    #[arg(long, default_value_t = 0.5)]
    pub qualifier_rate: f64,
    #[arg(long, default_value_t = 6)]
    pub min_user_degree: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblationFlag {
    Sa,
    Dh,
    Ssl,
}

/// Config-file and flag overrides shared by train / ablate / sweep.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Flat key=value config file; flags override file values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub ablation: Vec<AblationFlag>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory with interactions.tsv, statements.tsv, alignment.tsv.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory to create.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from an existing checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Density group count.
    #[arg(long, default_value_t = 4)]
    pub groups: usize,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Seeds per variant, starting at the configured seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, default_value_t = 4)]
    pub groups: usize,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepGrid {
    Tau,
    Layers,
    Both,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SweepGrid::Both)]
    pub grid: SweepGrid,
    #[command(flatten)]
    pub config: ConfigArgs,
}

/// Parse a flat `key=value` config file. Unknown keys are rejected by
/// name; blank lines and `#` comments are skipped.
pub fn parse_config_text(text: &str) -> Result<TrainingConfig, CliError> {
    let mut cfg = TrainingConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::BadConfig(format!("line {}: expected key=value, got {line:?}", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        let bad = |what: &str| CliError::BadConfig(format!("key {key}: bad {what} {value:?}"));
        match key {
            "dim" => cfg.dim = value.parse().map_err(|_| bad("integer"))?,
            "layers" => cfg.layers = value.parse().map_err(|_| bad("integer"))?,
            "k" => cfg.k = value.parse().map_err(|_| bad("integer"))?,
            "alpha" => cfg.alpha = value.parse().map_err(|_| bad("number"))?,
            "tau" => cfg.tau = value.parse().map_err(|_| bad("number"))?,
            "lambda1" => cfg.lambda1 = value.parse().map_err(|_| bad("number"))?,
            "lambda2" => cfg.lambda2 = value.parse().map_err(|_| bad("number"))?,
            "learning_rate" => cfg.learning_rate = value.parse().map_err(|_| bad("number"))?,
            "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad("integer"))?,
            "epochs" => cfg.epochs = value.parse().map_err(|_| bad("integer"))?,
            "seed" => cfg.seed = value.parse().map_err(|_| bad("integer"))?,
            "no_sa" => cfg.no_sa = value.parse().map_err(|_| bad("bool"))?,
            "no_dh" => cfg.no_dh = value.parse().map_err(|_| bad("bool"))?,
            "no_ssl" => cfg.no_ssl = value.parse().map_err(|_| bad("bool"))?,
            "phi" => cfg.phi = value.parse().map_err(CliError::BadConfig)?,
            "activation" => cfg.activation = value.parse().map_err(CliError::BadConfig)?,
            "stare_variant" => cfg.stare_variant = value.parse().map_err(|_| bad("bool"))?,
            "include_positive" => cfg.include_positive = value.parse().map_err(|_| bad("bool"))?,
            "ssl_full_set" => cfg.ssl_full_set = value.parse().map_err(|_| bad("bool"))?,
            "include_self_loops" => {
                cfg.include_self_loops = value.parse().map_err(|_| bad("bool"))?
            }
            "eval_every" => cfg.eval_every = value.parse().map_err(|_| bad("integer"))?,
            "patience" => cfg.patience = value.parse().map_err(|_| bad("integer"))?,
            other => return Err(CliError::BadConfig(format!("unknown key {other:?}"))),
        }
    }
    Ok(cfg)
}

/// Resolve the effective config: defaults, then file, then flags.
pub fn resolve_config(args: &ConfigArgs) -> Result<TrainingConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => parse_config_text(&read_file(path)?)?,
        None => TrainingConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    for flag in &args.ablation {
        match flag {
            AblationFlag::Sa => cfg.no_sa = true,
            AblationFlag::Dh => cfg.no_dh = true,
            AblationFlag::Ssl => cfg.no_ssl = true,
        }
    }
    if let Some(v) = args.tau {
        cfg.tau = v;
    }
    if let Some(v) = args.layers {
        cfg.layers = v;
    }
    if let Some(v) = args.k {
        cfg.k = v;
    }
    if let Some(v) = args.lambda1 {
        cfg.lambda1 = v;
    }
    if let Some(v) = args.lambda2 {
        cfg.lambda2 = v;
    }
    if let Some(v) = args.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.dim {
        cfg.dim = v;
    }
    Ok(cfg)
}

fn read_file(path: &Path) -> Result<String, CliError> {
    if !path.exists() {
        return Err(CliError::MissingFile(path.to_path_buf()));
    }
    std::fs::read_to_string(path).map_err(runtime)
}

/// Load the three dataset files from a directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    let graph = parse_interactions(&read_file(&dir.join("interactions.tsv"))?).map_err(runtime)?;
    let mut store = parse_statements(&read_file(&dir.join("statements.tsv"))?).map_err(runtime)?;
    let alignment = parse_alignment(&read_file(&dir.join("alignment.tsv"))?, &graph, &mut store)
        .map_err(runtime)?;
    Ok(Dataset {
        graph,
        store,
        alignment,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub config: TrainingConfig,
    /// Dataset file name to sha256 hex digest.
    pub dataset: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

fn dataset_hashes(dir: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut hashes = BTreeMap::new();
    for name in ["interactions.tsv", "statements.tsv", "alignment.tsv"] {
        let path = dir.join(name);
        if path.exists() {
            hashes.insert(name.to_string(), sha256_hex(read_file(&path)?.as_bytes()));
        }
    }
    Ok(hashes)
}

fn write_out(dir: &Path, name: &str, content: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(runtime)?;
    std::fs::write(dir.join(name), content).map_err(runtime)
}

fn write_manifest(
    dir: &Path,
    data_dir: &Path,
    config: &TrainingConfig,
    outputs: &[&str],
) -> Result<(), CliError> {
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed,
        config: config.clone(),
        dataset: dataset_hashes(data_dir)?,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(runtime)?;
    write_out(dir, "manifest.json", &(json + "\n"))
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<(), CliError> {
    let cfg = GeneratorConfig {
        users: args.users,
        items: args.items,
        clusters: args.clusters,
        p_in: args.p_in,
        p_out: args.p_out,
        qualifier_rate: args.qualifier_rate,
        min_user_degree: args.min_user_degree,
        seed: args.seed,
    };
    let files = generate(&cfg).map_err(|e| CliError::BadConfig(e.to_string()))?;
    write_out(&args.out, "interactions.tsv", &files.interactions)?;
    write_out(&args.out, "statements.tsv", &files.statements)?;
    write_out(&args.out, "alignment.tsv", &files.alignment)?;
    write_out(&args.out, "clusters.tsv", &files.clusters)?;
    let json = serde_json::to_string_pretty(&cfg).map_err(runtime)?;
    write_out(&args.out, "generator.json", &(json + "\n"))?;
    Ok(())
}

/// Test metrics of a trained state; falls back to validation edges when
/// the dataset was too small to hold out a test split.
fn test_report(
    data: &Dataset,
    split: &Split,
    state: &ModelState,
    groups: usize,
) -> Result<(EvalReport, String), CliError> {
    let (zu, zv) = forward_values(data, &split.train, state).map_err(runtime)?;
    let edges = if !split.test.is_empty() {
        &split.test
    } else {
        &split.valid
    };
    let report = if edges.is_empty() {
        let train_edges: Vec<_> = split.train.edges().collect();
        evaluate(&zu, &zv, None, &train_edges, 20)
    } else {
        evaluate(&zu, &zv, Some(&split.train), edges, 20)
    };
    let stats = density_group_eval(&zu, &zv, &split.train, edges, groups.max(2), 20);
    Ok((report, groups_tsv(&stats, 20)))
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let data = load_dataset(&args.data)?;
    let state = match &args.resume {
        Some(path) => {
            if !path.exists() {
                return Err(CliError::MissingFile(path.clone()));
            }
            ModelState::load_file(path).map_err(runtime)?
        }
        None => init_params(&data, &resolve_config(&args.config)?),
    };
    let config = state.config.clone();
    let split = split_edges(&data.graph, config.seed);
    let outcome = train(&data, &split, state).map_err(runtime)?;
    std::fs::create_dir_all(&args.out).map_err(runtime)?;
    write_out(&args.out, "history.tsv", &history_tsv(&outcome.history))?;
    outcome
        .best
        .save_file(args.out.join("checkpoint"))
        .map_err(runtime)?;
    let (report, groups) = test_report(&data, &split, &outcome.best, 4)?;
    write_out(&args.out, "metrics.tsv", &metrics_tsv(&report, 20))?;
    write_out(&args.out, "groups.tsv", &groups)?;
    write_manifest(
        &args.out,
        &args.data,
        &config,
        &["checkpoint", "history.tsv", "metrics.tsv", "groups.tsv"],
    )?;
    println!(
        "trained {} epochs, best recall@20 {:.4} at epoch {}",
        outcome.state.epoch, outcome.best_recall, outcome.best_epoch
    );
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    if !args.checkpoint.exists() {
        return Err(CliError::MissingFile(args.checkpoint.clone()));
    }
    let data = load_dataset(&args.data)?;
    let state = ModelState::load_file(&args.checkpoint).map_err(runtime)?;
    let split = split_edges(&data.graph, state.config.seed);
    let (report, groups) = test_report(&data, &split, &state, args.groups)?;
    write_out(&args.out, "metrics.tsv", &metrics_tsv(&report, 20))?;
    write_out(&args.out, "groups.tsv", &groups)?;
    write_manifest(
        &args.out,
        &args.data,
        &state.config,
        &["metrics.tsv", "groups.tsv"],
    )?;
    println!(
        "recall@20 {:.4}, ndcg@20 {:.4} over {} users",
        report.recall, report.ndcg, report.n_users
    );
    Ok(())
}

pub const ABLATION_VARIANTS: [&str; 4] = ["full", "-sa", "-dh", "-ssl"];

fn variant_config(base: &TrainingConfig, variant: &str) -> TrainingConfig {
    let mut cfg = base.clone();
    match variant {
        "full" => {}
        "-sa" => cfg.no_sa = true,
        "-dh" => cfg.no_dh = true,
        "-ssl" => cfg.no_ssl = true,
        other => unreachable!("unknown variant {other}"),
    }
    cfg
}

/// Per-variant mean metrics over shared seeds.
pub struct AblationRow {
    pub variant: &'static str,
    pub recall: f64,
    pub ndcg: f64,
    /// MAD of the pooled representations.
    pub user_mad: f64,
    pub item_mad: f64,
    /// MAD of the deepest layer, where over-smoothing accumulates.
    pub user_mad_last: f64,
    pub item_mad_last: f64,
    pub sparsest_recall: f64,
}

/// Train every variant on every seed and average. The same seed list is
/// shared across variants so differences are attributable to the flags.
pub fn run_ablation(
    data: &Dataset,
    base: &TrainingConfig,
    seeds: &[u64],
    groups: usize,
) -> Result<Vec<AblationRow>, CliError> {
    let mut rows = Vec::new();
    for variant in ABLATION_VARIANTS {
        let mut sums = [0.0f64; 7];
        for &seed in seeds {
            let mut cfg = variant_config(base, variant);
            cfg.seed = seed;
            let split = split_edges(&data.graph, seed);
            let outcome = train(data, &split, init_params(data, &cfg)).map_err(runtime)?;
            let (zu, zv) = forward_values(data, &split.train, &outcome.best).map_err(runtime)?;
            let (ul, il) =
                crate::trainer::forward_layer_values(data, &split.train, &outcome.best)
                    .map_err(runtime)?;
            let edges = if !split.test.is_empty() {
                &split.test
            } else {
                &split.valid
            };
            let report = evaluate(&zu, &zv, Some(&split.train), edges, 20);
            let stats = density_group_eval(&zu, &zv, &split.train, edges, groups.max(2), 20);
            sums[0] += report.recall;
            sums[1] += report.ndcg;
            sums[2] += report.user_mad;
            sums[3] += report.item_mad;
            sums[4] += crate::eval::mad(ul.last().unwrap());
            sums[5] += crate::eval::mad(il.last().unwrap());
            sums[6] += stats[0].recall;
        }
        let n = seeds.len() as f64;
        rows.push(AblationRow {
            variant,
            recall: sums[0] / n,
            ndcg: sums[1] / n,
            user_mad: sums[2] / n,
            item_mad: sums[3] / n,
            user_mad_last: sums[4] / n,
            item_mad_last: sums[5] / n,
            sparsest_recall: sums[6] / n,
        });
    }
    Ok(rows)
}

pub fn ablation_tsv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant\trecall@20\tndcg@20\tsparsest_group_recall@20\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{:.12e}\t{:.12e}\t{:.12e}\n",
            r.variant, r.recall, r.ndcg, r.sparsest_recall
        ));
    }
    out
}

pub fn mad_tsv(rows: &[AblationRow]) -> String {
    let mut out =
        String::from("variant\tuser_mad\titem_mad\tuser_mad_last_layer\titem_mad_last_layer\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}\n",
            r.variant, r.user_mad, r.item_mad, r.user_mad_last, r.item_mad_last
        ));
    }
    out
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<(), CliError> {
    let data = load_dataset(&args.data)?;
    let base = resolve_config(&args.config)?;
    let seeds: Vec<u64> = (0..args.seeds.max(1)).map(|i| base.seed + i).collect();
    let rows = run_ablation(&data, &base, &seeds, args.groups)?;
    write_out(&args.out, "ablation.tsv", &ablation_tsv(&rows))?;
    write_out(&args.out, "mad.tsv", &mad_tsv(&rows))?;
    write_manifest(&args.out, &args.data, &base, &["ablation.tsv", "mad.tsv"])?;
    Ok(())
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let data = load_dataset(&args.data)?;
    let base = resolve_config(&args.config)?;
    let mut points: Vec<(&str, f64, TrainingConfig)> = Vec::new();
    if matches!(args.grid, SweepGrid::Tau | SweepGrid::Both) {
        for tau in TAU_GRID {
            let mut cfg = base.clone();
            cfg.tau = tau;
            points.push(("tau", tau, cfg));
        }
    }
    if matches!(args.grid, SweepGrid::Layers | SweepGrid::Both) {
        for layers in LAYER_GRID {
            let mut cfg = base.clone();
            cfg.layers = layers;
            points.push(("layers", layers as f64, cfg));
        }
    }
    let mut out = String::from("param\tvalue\trecall@20\tndcg@20\n");
    for (param, value, cfg) in points {
        let split = split_edges(&data.graph, cfg.seed);
        let outcome = train(&data, &split, init_params(&data, &cfg)).map_err(runtime)?;
        let (zu, zv) = forward_values(&data, &split.train, &outcome.best).map_err(runtime)?;
        let edges = if !split.test.is_empty() {
            &split.test
        } else {
            &split.valid
        };
        let report = if edges.is_empty() {
            let train_edges: Vec<_> = split.train.edges().collect();
            evaluate(&zu, &zv, None, &train_edges, 20)
        } else {
            evaluate(&zu, &zv, Some(&split.train), edges, 20)
        };
        out.push_str(&format!(
            "{param}\t{value}\t{:.12e}\t{:.12e}\n",
            report.recall, report.ndcg
        ));
    }
    write_out(&args.out, "sensitivity.tsv", &out)?;
    write_manifest(&args.out, &args.data, &base, &["sensitivity.tsv"])?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Sweep(args) => cmd_sweep(args),
    }
}
