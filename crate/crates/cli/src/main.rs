//! `rewardmatch` command line: data generation, match indexes, training,
//! evaluation, augmentation and entropy benchmarks.

mod config;
mod manifest;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rewardmatch::augmentation::{augment_classic, augment_raml, edit_distance_distribution, edit_sensitivity_study, sensitivity_csv, AugmentConfig};
use rewardmatch::dataset::{build_dataset, examples_to_tsv, BuildConfig, DatasetError, DatasetSplits};
use rewardmatch::entropy::{entropy_bench, BenchConfig, EstimatorKind};
use rewardmatch::evalmetrics::{conditional_eval_scalar, test_nll_per_token, ModelSampler};
use rewardmatch::experiment::checkpoint_hash;
use rewardmatch::grammar::{expr_grammar, parse_pcfg};
use rewardmatch::model::{ConditionalLstm, ModelConfig};
use rewardmatch::reward::{build_scalar_index, MatchIndex, RewardError, RewardSpec};
use rewardmatch::training::{train_ml, train_raml_is, train_reinforce, train_surrogate, ObjectiveKind, TrainConfig, TrainOutcome};

use manifest::RunManifest;

/// Default data directory when `--data` is not given.
const DATA_DIR_ENV: &str = "REWARDMATCH_DATA_DIR";
const INDEX_FILE: &str = "index.bin";
const MODEL_FILE: &str = "model.ckpt";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("lineage check failed: {0}")]
    Lineage(String),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Lineage(_) => 2,
            CliError::Runtime(_) | CliError::Io(_) => 1,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Parser)]
#[command(name = "rewardmatch", version, about = "Reward-matched conditional generation pipeline")]
struct Cli {
    /// Worker thread cap for parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a grammar and write train/valid/test splits.
    GenData(GenDataArgs),
    /// Build the reward match index for a dataset.
    Index(IndexArgs),
    /// Train a model with one of the objectives.
    Train(TrainArgs),
    /// Sample from a trained model and score it on test targets.
    Eval(EvalArgs),
    /// Write an edit-distance augmented training set.
    Augment(AugmentArgs),
    /// Compare entropy estimators on a trained model.
    EntropyBench(BenchArgs),
}

#[derive(Args)]
struct DataArg {
    /// Dataset directory (defaults to $REWARDMATCH_DATA_DIR).
    #[arg(long)]
    data: Option<PathBuf>,
}

impl DataArg {
    fn dir(&self) -> Result<PathBuf, CliError> {
        self.data
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .ok_or_else(|| CliError::Usage(format!("no --data given and {DATA_DIR_ENV} is unset")))
    }

    fn load(&self) -> Result<(PathBuf, DatasetSplits), CliError> {
        let dir = self.dir()?;
        let splits = DatasetSplits::read_dir(&dir).map_err(|e| match e {
            DatasetError::Io(e) => CliError::Usage(format!("cannot read dataset {}: {e}", dir.display())),
            DatasetError::HashMismatch { .. } => CliError::Lineage(e.to_string()),
            other => runtime(other),
        })?;
        Ok((dir, splits))
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// Grammar file; the built-in expression grammar when omitted.
    #[arg(long)]
    grammar: Option<PathBuf>,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    val: usize,
    #[arg(long)]
    test: usize,
    /// Keep at most this many training examples.
    #[arg(long)]
    train_cap: Option<usize>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IndexArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long, value_parser = parse_objective)]
    objective: Option<ObjectiveKind>,
    /// `key = value` file with TrainConfig keys; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Index directory from `index`; built in memory when omitted.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Model directory to start REINFORCE from; an ML warm start is trained
    /// first when omitted.
    #[arg(long)]
    warm_start: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    entropy_weight: Option<f64>,
    /// Extra `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, default_value_t = 64)]
    embed_dim: usize,
    #[arg(long, default_value_t = 128)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 2)]
    num_layers: usize,
    /// Edit-distance temperature for raml-is proposals.
    #[arg(long, default_value_t = 0.745)]
    tau: f64,
}

fn parse_objective(s: &str) -> Result<ObjectiveKind, String> {
    ObjectiveKind::parse(s).ok_or_else(|| format!("unknown objective `{s}`"))
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArg,
    /// Model directory written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 25)]
    samples: usize,
    #[arg(long, default_value_t = 2000)]
    targets: usize,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AugmentMode {
    Classic,
    Raml,
}

#[derive(Clone, Copy, ValueEnum)]
enum DistanceArg {
    Exponential,
    CountWeighted,
}

#[derive(Args)]
struct AugmentArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long, value_enum)]
    mode: AugmentMode,
    #[arg(long, default_value_t = 0.745)]
    tau: f64,
    #[arg(long, default_value_t = 5)]
    max_edit_distance: usize,
    #[arg(long, value_enum, default_value = "exponential")]
    distance: DistanceArg,
    #[arg(long, default_value_t = 10)]
    per_instance: usize,
    #[arg(long, default_value_t = 500)]
    max_attempts: usize,
    /// Also run the edit sensitivity study with this many perturbations per m.
    #[arg(long)]
    study_samples: Option<usize>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 15)]
    trials: usize,
    /// Sample sizes, comma separated.
    #[arg(long = "S", value_delimiter = ',', default_values_t = vec![1, 10, 50])]
    sample_sizes: Vec<usize>,
    /// Number of test targets to benchmark on.
    #[arg(long, default_value_t = 5)]
    targets: usize,
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<String>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Index(a) => index(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Augment(a) => augment(a),
        Command::EntropyBench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn finish(mut m: RunManifest, dir: &Path, outputs: &[&str], started: Instant) -> Result<(), CliError> {
    m.outputs = outputs.iter().map(|o| dir.join(o)).collect();
    m.wall_clock_seconds = started.elapsed().as_secs_f64();
    m.write(dir)
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String, CliError> {
    Ok(serde_json::to_string_pretty(v).map_err(runtime)? + "\n")
}

fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let mut m = RunManifest::new("gen-data", None, Some(a.seed));
    let pcfg = match &a.grammar {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read grammar {}: {e}", p.display())))?;
            parse_pcfg(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => expr_grammar(),
    };
    let mut cfg = BuildConfig::new(a.n, a.val, a.test, a.seed);
    cfg.train_cap = a.train_cap;
    let splits = build_dataset(&pcfg, &cfg).map_err(|e| match e {
        DatasetError::InsufficientExamples { .. } => CliError::Usage(e.to_string()),
        other => runtime(other),
    })?;
    splits.write_dir(&a.out).map_err(runtime)?;
    m.input_hashes.insert("grammar".into(), pcfg.source_hash().to_string());
    m.output_hashes.insert("dataset".into(), splits.manifest.dataset_hash.clone());
    m.config = serde_json::json!({"n": a.n, "val": a.val, "test": a.test, "train_cap": a.train_cap});
    log::info!(
        "{} unique of {} ({:.3}); train {} valid {} test {}",
        splits.manifest.unique,
        a.n,
        splits.manifest.unique_fraction(),
        splits.train.len(),
        splits.valid.len(),
        splits.test.len()
    );
    finish(m, &a.out, &["train.tsv", "valid.tsv", "test.tsv", "vocab.txt", "dataset.json"], started)
}

fn train_values(splits: &DatasetSplits) -> Vec<i64> {
    splits.train.iter().map(|e| e.value).collect()
}

fn index(a: IndexArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let (_, splits) = a.data.load()?;
    let hash = splits.manifest.dataset_hash.clone();
    let idx = build_scalar_index(&train_values(&splits));
    fs::create_dir_all(&a.out)?;
    idx.save(&a.out.join(INDEX_FILE), &hash).map_err(runtime)?;
    let mut m = RunManifest::new("index", None, None);
    m.input_hashes.insert("dataset".into(), hash);
    finish(m, &a.out, &[INDEX_FILE], started)
}

fn load_index(dir: &Path, dataset_hash: &str) -> Result<MatchIndex, CliError> {
    MatchIndex::load(&dir.join(INDEX_FILE), dataset_hash).map_err(|e| match e {
        RewardError::StaleIndex { .. } => CliError::Lineage(e.to_string()),
        RewardError::Io(e) => CliError::Usage(format!("cannot read index in {}: {e}", dir.display())),
        other => runtime(other),
    })
}

fn load_model(dir: &Path, dataset_hash: &str) -> Result<(ConditionalLstm, String), CliError> {
    let m = RunManifest::read(dir)?;
    m.require_input("dataset", dataset_hash)?;
    let model = ConditionalLstm::load(&dir.join(MODEL_FILE)).map_err(|e| CliError::Usage(format!("cannot load model in {}: {e}", dir.display())))?;
    let hash = checkpoint_hash(&model);
    if let Some(recorded) = m.output_hashes.get("checkpoint") {
        if *recorded != hash {
            return Err(CliError::Lineage(format!("checkpoint in {} hashes to {hash}, manifest says {recorded}", dir.display())));
        }
    }
    Ok((model, hash))
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let (_, splits) = a.data.load()?;
    let hash = splits.manifest.dataset_hash.clone();

    let mut flags: Vec<(String, String)> = Vec::new();
    if let Some(o) = a.objective {
        flags.push(("objective".into(), o.name().replace('-', "_")));
    }
    for (k, v) in [
        ("max_epochs", a.epochs.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("lr", a.lr.map(|v| v.to_string())),
        ("entropy_weight", a.entropy_weight.map(|v| v.to_string())),
    ] {
        if let Some(v) = v {
            flags.push((k.into(), v));
        }
    }
    for s in &a.set {
        let (k, v) = s.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
        flags.push((k.trim().into(), v.trim().into()));
    }
    flags.push(("seed".into(), a.seed.to_string()));
    let pairs = config::load_pairs(a.config.as_deref(), flags)?;
    let cfg: TrainConfig = config::apply(&TrainConfig::default(), &pairs)?;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if cfg.objective == ObjectiveKind::SurrogateEntropy && cfg.entropy_weight <= 0.0 {
        return Err(CliError::Usage("surrogate-entropy needs entropy_weight > 0".into()));
    }
    let mcfg = ModelConfig {
        vocab_size: splits.vocab.len(),
        embed_dim: a.embed_dim,
        cond_dim: 1,
        hidden_dim: a.hidden_dim,
        num_layers: a.num_layers,
        max_len: splits.longest_sequence(),
    };
    mcfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let mut m = RunManifest::new("train", a.config.as_deref(), Some(cfg.seed));
    m.input_hashes.insert("dataset".into(), hash.clone());
    let outcome: TrainOutcome = match cfg.objective {
        ObjectiveKind::Ml => train_ml(&splits, mcfg, &cfg).map_err(runtime)?,
        ObjectiveKind::Surrogate | ObjectiveKind::SurrogateEntropy => {
            let idx = match &a.index {
                Some(dir) => {
                    RunManifest::read(dir)?.require_input("dataset", &hash)?;
                    load_index(dir, &hash)?
                }
                None => build_scalar_index(&train_values(&splits)),
            };
            train_surrogate(&splits, &idx, mcfg, &cfg).map_err(runtime)?
        }
        ObjectiveKind::Reinforce => {
            let warm = match &a.warm_start {
                Some(dir) => {
                    let (model, h) = load_model(dir, &hash)?;
                    m.input_hashes.insert("warm_start".into(), h);
                    model
                }
                None => {
                    let wcfg = TrainConfig {
                        objective: ObjectiveKind::Ml,
                        max_epochs: cfg.warm_start_epochs,
                        ..cfg.clone()
                    };
                    train_ml(&splits, mcfg, &wcfg).map_err(runtime)?.model
                }
            };
            train_reinforce(&splits, warm, &cfg).map_err(runtime)?
        }
        ObjectiveKind::RamlIs => {
            let aug = AugmentConfig { tau: a.tau, ..AugmentConfig::default() };
            train_raml_is(&splits, &aug, RewardSpec::gaussian(), mcfg, &cfg).map_err(runtime)?
        }
    };
    fs::create_dir_all(&a.out)?;
    outcome.model.save(&a.out.join(MODEL_FILE), true).map_err(runtime)?;
    fs::write(a.out.join("history.csv"), outcome.history.to_csv())?;
    fs::write(a.out.join("summary.json"), to_json(&outcome.history)?)?;
    m.config = serde_json::json!({"train": cfg, "model": mcfg});
    m.output_hashes.insert("checkpoint".into(), checkpoint_hash(&outcome.model));
    finish(m, &a.out, &[MODEL_FILE, "history.csv", "summary.json"], started)
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let (_, splits) = a.data.load()?;
    let hash = splits.manifest.dataset_hash.clone();
    let (model, ckpt) = load_model(&a.model, &hash)?;
    let targets = &splits.test[..a.targets.min(splits.test.len())];
    let train: HashSet<String> = splits.train.iter().map(|e| e.expr.clone()).collect();
    let sampler = ModelSampler {
        model: &model,
        vocab: &splits.vocab,
    };
    let mut report = conditional_eval_scalar(&sampler, targets, &train, a.samples, a.repeats, a.seed).map_err(runtime)?;
    report.test_nll_per_token = Some(test_nll_per_token(&model, targets).map_err(runtime)?);
    report.metadata.checkpoint_hash = Some(ckpt.clone());
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("report.json"), to_json(&report)?)?;
    let mut m = RunManifest::new("eval", None, Some(a.seed));
    m.input_hashes.insert("dataset".into(), hash);
    m.input_hashes.insert("checkpoint".into(), ckpt);
    m.config = serde_json::json!({"samples": a.samples, "targets": targets.len(), "repeats": a.repeats});
    log::info!(
        "validity {:.4} uniqueness {:.4} novelty {:.4} mae {:.3} exact {:.4} within3 {:.4}",
        report.validity.mean,
        report.uniqueness.mean,
        report.novelty.mean,
        report.mae.mean,
        report.exact_accuracy.mean,
        report.within_3_accuracy.mean
    );
    finish(m, &a.out, &["report.json"], started)
}

fn augment(a: AugmentArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let (_, splits) = a.data.load()?;
    let cfg = AugmentConfig {
        tau: a.tau,
        max_edit_distance: a.max_edit_distance,
        distance_mode: match a.distance {
            DistanceArg::Exponential => rewardmatch::augmentation::DistanceMode::Exponential,
            DistanceArg::CountWeighted => rewardmatch::augmentation::DistanceMode::CountWeighted,
        },
        per_instance_target: a.per_instance,
        max_attempts: a.max_attempts,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let set = match a.mode {
        AugmentMode::Classic => augment_classic(&splits.train, &splits.vocab, &cfg, a.seed),
        AugmentMode::Raml => augment_raml(&splits.train, &splits.vocab, &cfg, a.seed),
    }
    .map_err(runtime)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("original.tsv"), examples_to_tsv(&set.originals))?;
    fs::write(a.out.join("augmented.tsv"), set.added_to_tsv())?;
    let mean_len = splits.train.iter().map(|e| e.expr.chars().count()).sum::<usize>() as f64 / splits.train.len().max(1) as f64;
    let calib = edit_distance_distribution(&cfg, mean_len.round() as usize, splits.vocab.chars().len());
    let summary = serde_json::json!({
        "added": set.added.len(),
        "shortfall": set.shortfall,
        "attempts": set.attempts,
        "mean_label_error": set.mean_label_error(),
        "edit_distance_distribution": calib,
        "p0": calib[0],
        "calibration_length": mean_len.round(),
    });
    fs::write(a.out.join("summary.json"), to_json(&summary)?)?;
    let mut outputs = vec!["original.tsv", "augmented.tsv", "summary.json"];
    if let Some(n) = a.study_samples {
        let rows = edit_sensitivity_study(&splits.train, splits.vocab.chars(), 0..=a.max_edit_distance, n, a.seed).map_err(runtime)?;
        fs::write(a.out.join("sensitivity.csv"), sensitivity_csv(&rows))?;
        outputs.push("sensitivity.csv");
    }
    log::info!("added {} pairs, shortfall {}, p(0) = {:.4}", set.added.len(), set.shortfall, calib[0]);
    let mut m = RunManifest::new("augment", None, Some(a.seed));
    m.input_hashes.insert("dataset".into(), splits.manifest.dataset_hash.clone());
    m.config = serde_json::to_value(cfg).map_err(runtime)?;
    finish(m, &a.out, &outputs, started)
}

fn bench(a: BenchArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let (_, splits) = a.data.load()?;
    let hash = splits.manifest.dataset_hash.clone();
    let (model, ckpt) = load_model(&a.model, &hash)?;
    let mut cfg = BenchConfig {
        sample_sizes: a.sample_sizes.clone(),
        trials: a.trials,
        seed: a.seed,
        ..BenchConfig::default()
    };
    if let Some(names) = &a.estimators {
        cfg.estimators = names
            .iter()
            .map(|n| EstimatorKind::parse(n).ok_or_else(|| CliError::Usage(format!("unknown estimator `{n}`"))))
            .collect::<Result<_, _>>()?;
    }
    let targets: Vec<Vec<f64>> = splits.test.iter().take(a.targets).map(|e| e.cond.clone()).collect();
    let report = entropy_bench(&model, &targets, &cfg).map_err(runtime)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("bench.csv"), report.to_csv())?;
    fs::write(a.out.join("summary.json"), to_json(&report.summary)?)?;
    let mut m = RunManifest::new("entropy-bench", None, Some(a.seed));
    m.input_hashes.insert("dataset".into(), hash);
    m.input_hashes.insert("checkpoint".into(), ckpt);
    m.config = serde_json::to_value(&cfg).map_err(runtime)?;
    finish(m, &a.out, &["bench.csv", "summary.json"], started)
}
