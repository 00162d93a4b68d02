//! Command-line front end: synthetic data generation, training, evaluation,
//! prediction, baselines, ensembling, and gradient checking.
//!
//! Settings resolve in order: built-in defaults (or `--profile desk`), then a
//! `key=value` config file, then flags. The seed falls back to the
//! `SKIPNET_SEED` environment variable when no flag or config entry sets it.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use skipnet::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use skipnet::data::{
    compute_track_skip_rates, load_sessions, FeatureSchema, SynthParams, TrackCatalog,
};
use skipnet::model::{run_model_grad_check, ModelConfig, ModelParams};
use skipnet::train_eval::{
    evaluate_baseline, evaluate_model, evaluate_predictions, load_predictions, majority_vote,
    predict_sessions, save_predictions, train, BaselineMode, EvalReport, PredictionRecord,
    TrainRunConfig,
};

const DEFAULT_SEED: u64 = 42;
const SEED_ENV: &str = "SKIPNET_SEED";

#[derive(Parser)]
#[command(name = "skipnet", version, about = "Sequential music-skip prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic corpus (catalog, sessions, schema).
    Synth(SynthArgs),
    /// Train a model and write checkpoints.
    Train(TrainArgs),
    /// Score a checkpoint or a prediction file against labelled sessions.
    Evaluate(EvaluateArgs),
    /// Write per-session predictions for a checkpoint.
    Predict(PredictArgs),
    /// Score one of the reference baselines.
    Baseline(BaselineArgs),
    /// Majority-vote prediction files and score the result.
    Ensemble(EnsembleArgs),
    /// Check model gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Training sessions to generate.
    #[arg(long, default_value_t = 20_000)]
    sessions: usize,
    /// Catalog size.
    #[arg(long, default_value_t = 500)]
    tracks: usize,
    /// Additionally generate a held-out test session file.
    #[arg(long, default_value_t = 0)]
    test_sessions: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Weight of the per-(user, track) taste term in the skip logit.
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    /// Weight of the within-session position term.
    #[arg(long, default_value_t = 0.8)]
    beta: f64,
    /// Weight of the previous-skip momentum term.
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    /// Taste bias of session track selection.
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// Session-level mood strength (relative to alpha).
    #[arg(long, default_value_t = 0.6)]
    mood: f64,
    /// Constant offset of the skip logit.
    #[arg(long, default_value_t = 0.0)]
    base_logit: f64,
    /// Observation noise on track features.
    #[arg(long, default_value_t = 0.1)]
    feature_noise: f64,
}

#[derive(Args, Clone)]
struct ModelFlags {
    /// Preset layer sizes.
    #[arg(long, value_enum, default_value_t = Profile::Paper)]
    profile: Profile,
    /// key=value settings file (flags win over it).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    learned_dim: Option<usize>,
    #[arg(long)]
    track_embed_dim: Option<usize>,
    #[arg(long)]
    session_lstm_size: Option<usize>,
    #[arg(long)]
    stacked_lstm_size: Option<usize>,
    #[arg(long)]
    head_hidden_size: Option<usize>,
    /// Feed zeros through padded RNN steps instead of masking.
    #[arg(long)]
    paper_padding: Option<bool>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Profile {
    /// Full-scale layer sizes.
    Paper,
    /// Tenth-size layers; trains in minutes.
    Desk,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    sessions: PathBuf,
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    /// Directory for checkpoints.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    validation_fraction: Option<f64>,
    /// Also write a checkpoint every N epochs.
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    sessions: PathBuf,
    /// Score a trained model...
    #[arg(long, conflicts_with = "preds")]
    checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    catalog: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    schema: Option<PathBuf>,
    /// ...or score an existing prediction file.
    #[arg(long)]
    preds: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    batch_size: usize,
    /// Emit the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    sessions: PathBuf,
    /// Output prediction file (JSON lines).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 300)]
    batch_size: usize,
}

#[derive(Args)]
struct BaselineArgs {
    /// all_skip, skip_rate, or last_action.
    #[arg(long)]
    mode: String,
    #[arg(long)]
    sessions: PathBuf,
    /// Training sessions for skip-rate statistics (skip_rate mode).
    #[arg(long)]
    train_sessions: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EnsembleArgs {
    /// Prediction files to vote over (odd count).
    #[arg(long, num_args = 1.., required = true)]
    preds: Vec<PathBuf>,
    #[arg(long)]
    sessions: PathBuf,
    /// Optionally write the voted predictions.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Baseline(args) => cmd_baseline(args),
        Command::Ensemble(args) => cmd_ensemble(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

// ---------------------------------------------------------------------------
// Configuration resolution

fn parse_config_file(path: &Path) -> anyhow::Result<HashMap<String, String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut map = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{}:{}: expected key=value", path.display(), i + 1))?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    const KNOWN: [&str; 12] = [
        "batch_size",
        "learning_rate",
        "epochs",
        "seed",
        "validation_fraction",
        "checkpoint_every",
        "learned_dim",
        "track_embed_dim",
        "session_lstm_size",
        "stacked_lstm_size",
        "head_hidden_size",
        "paper_padding",
    ];
    for key in map.keys() {
        if !KNOWN.contains(&key.as_str()) {
            bail!("{}: unknown setting `{key}` (expected one of {KNOWN:?})", path.display());
        }
    }
    Ok(map)
}

fn config_get<T: std::str::FromStr>(
    map: &HashMap<String, String>,
    key: &str,
) -> anyhow::Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match map.get(key) {
        None => Ok(None),
        Some(raw) => raw
            .parse::<T>()
            .map(Some)
            .map_err(|e| anyhow!("config setting `{key}`: cannot parse `{raw}`: {e}")),
    }
}

fn resolve_model_config(
    flags: &ModelFlags,
    file: &HashMap<String, String>,
) -> anyhow::Result<ModelConfig> {
    let mut cfg = match flags.profile {
        Profile::Paper => ModelConfig::default(),
        Profile::Desk => ModelConfig::desk(),
    };
    if let Some(v) = config_get(file, "learned_dim")? {
        cfg.learned_dim = v;
    }
    if let Some(v) = config_get(file, "track_embed_dim")? {
        cfg.track_embed_dim = v;
    }
    if let Some(v) = config_get(file, "session_lstm_size")? {
        cfg.session_lstm_size = v;
    }
    if let Some(v) = config_get(file, "stacked_lstm_size")? {
        cfg.stacked_lstm_size = v;
    }
    if let Some(v) = config_get(file, "head_hidden_size")? {
        cfg.head_hidden_size = v;
    }
    if let Some(v) = config_get(file, "paper_padding")? {
        cfg.paper_padding = v;
    }
    if let Some(v) = flags.learned_dim {
        cfg.learned_dim = v;
    }
    if let Some(v) = flags.track_embed_dim {
        cfg.track_embed_dim = v;
    }
    if let Some(v) = flags.session_lstm_size {
        cfg.session_lstm_size = v;
    }
    if let Some(v) = flags.stacked_lstm_size {
        cfg.stacked_lstm_size = v;
    }
    if let Some(v) = flags.head_hidden_size {
        cfg.head_hidden_size = v;
    }
    if let Some(v) = flags.paper_padding {
        cfg.paper_padding = v;
    }
    Ok(cfg)
}

/// Flag > SKIPNET_SEED > config file > default.
fn resolve_seed(flag: Option<u64>, file: &HashMap<String, String>) -> anyhow::Result<u64> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    if let Ok(raw) = std::env::var(SEED_ENV) {
        return raw.parse().map_err(|e| anyhow!("{SEED_ENV}=`{raw}` is not a seed: {e}"));
    }
    if let Some(seed) = config_get(file, "seed")? {
        return Ok(seed);
    }
    Ok(DEFAULT_SEED)
}

// ---------------------------------------------------------------------------
// Subcommands

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    let seed = resolve_seed(args.seed, &HashMap::new())?;
    let params = SynthParams {
        n_sessions: args.sessions,
        n_tracks: args.tracks,
        n_test_sessions: args.test_sessions,
        seed,
        taste_weight: args.alpha,
        position_weight: args.beta,
        momentum_weight: args.gamma,
        selection_weight: args.tau,
        mood_weight: args.mood,
        base_logit: args.base_logit,
        feature_noise: args.feature_noise,
    };
    let corpus = skipnet::data::synth_generate(&params)?;
    let written = corpus.write_to_dir(&args.out)?;
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let file = match &args.model.config {
        Some(path) => parse_config_file(path)?,
        None => HashMap::new(),
    };
    let model_cfg = resolve_model_config(&args.model, &file)?;
    let seed = resolve_seed(args.seed, &file)?;
    let mut run = TrainRunConfig { seed, ..TrainRunConfig::default() };
    if let Some(v) = config_get(&file, "batch_size")? {
        run.batch_size = v;
    }
    if let Some(v) = config_get(&file, "learning_rate")? {
        run.learning_rate = v;
    }
    if let Some(v) = config_get(&file, "epochs")? {
        run.epochs = v;
    }
    if let Some(v) = config_get(&file, "validation_fraction")? {
        run.validation_fraction = v;
    }
    if let Some(v) = config_get(&file, "checkpoint_every")? {
        run.checkpoint_every = Some(v);
    }
    if let Some(v) = args.batch_size {
        run.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        run.learning_rate = v;
    }
    if let Some(v) = args.epochs {
        run.epochs = v;
    }
    if let Some(v) = args.validation_fraction {
        run.validation_fraction = v;
    }
    if let Some(v) = args.checkpoint_every {
        run.checkpoint_every = Some(v);
    }

    let sessions = load_sessions(&args.sessions)?;
    let catalog = TrackCatalog::load(&args.catalog)?;
    let schema = FeatureSchema::load(&args.schema)?;
    fs::create_dir_all(&args.out)?;

    println!(
        "training on {} sessions ({} tracks, batch {}, lr {}, {} epochs, seed {seed})",
        sessions.len(),
        catalog.len(),
        run.batch_size,
        run.learning_rate,
        run.epochs
    );
    let cadence = run.checkpoint_every;
    let out_dir = args.out.clone();
    let catalog_ref = &catalog;
    let schema_ref = &schema;
    let outcome = train(&run, &model_cfg, &sessions, &catalog, &schema, |stats, params| {
        println!(
            "epoch {:>3}  train loss {:.5}  val MAA {:.4}  val first {:.4}",
            stats.epoch, stats.mean_train_loss, stats.val_maa, stats.val_first
        );
        if let Some(every) = cadence {
            if every > 0 && stats.epoch % every == 0 {
                let path = out_dir.join(format!("epoch_{:03}.skpm", stats.epoch));
                let ckpt =
                    Checkpoint::new(params, catalog_ref, schema_ref, seed, stats.epoch as u64, None);
                if let Err(e) = write_checkpoint(&path, &ckpt) {
                    eprintln!("warning: could not write {}: {e}", path.display());
                }
            }
        }
    })?;

    let best_path = args.out.join("best.skpm");
    let steps = outcome.step_losses.len() as u64;
    let ckpt = Checkpoint::new(&outcome.best, &catalog, &schema, seed, steps, None);
    write_checkpoint(&best_path, &ckpt)?;
    println!(
        "best epoch {} (val MAA {:.4}) -> {}",
        outcome.best_epoch,
        outcome.best_val_maa,
        best_path.display()
    );
    Ok(())
}

fn load_model_for_scoring(
    checkpoint: &Path,
    catalog: &Path,
    schema: &Path,
) -> anyhow::Result<(ModelParams, TrackCatalog, FeatureSchema)> {
    let ckpt = read_checkpoint(checkpoint)?;
    let schema = FeatureSchema::load(schema)?;
    if schema.fingerprint() != ckpt.schema_fingerprint {
        bail!(
            "schema fingerprint {} does not match the checkpoint's {}",
            schema.fingerprint(),
            ckpt.schema_fingerprint
        );
    }
    let catalog =
        TrackCatalog::load_with_stats(catalog, ckpt.feature_means.clone(), ckpt.feature_stds.clone())?;
    Ok((ckpt.model_params(), catalog, schema))
}

fn emit_report(report: &EvalReport, json: bool) -> anyhow::Result<()> {
    if json {
        println!("{}", serde_json::to_string_pretty(report)?);
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let sessions = load_sessions(&args.sessions)?;
    let report = match (&args.checkpoint, &args.preds) {
        (Some(ckpt), None) => {
            let catalog = args
                .catalog
                .as_ref()
                .ok_or_else(|| anyhow!("--checkpoint evaluation needs --catalog"))?;
            let schema = args
                .schema
                .as_ref()
                .ok_or_else(|| anyhow!("--checkpoint evaluation needs --schema"))?;
            let (params, catalog, schema) = load_model_for_scoring(ckpt, catalog, schema)?;
            evaluate_model(&params, &sessions, &catalog, &schema, args.batch_size)?
        }
        (None, Some(preds)) => {
            let records = load_predictions(preds)?;
            evaluate_predictions(&records, &sessions)?
        }
        _ => bail!("pass exactly one of --checkpoint or --preds"),
    };
    emit_report(&report, args.json)
}

fn cmd_predict(args: PredictArgs) -> anyhow::Result<()> {
    let (params, catalog, schema) =
        load_model_for_scoring(&args.checkpoint, &args.catalog, &args.schema)?;
    let sessions = load_sessions(&args.sessions)?;
    let records = predict_sessions(&params, &sessions, &catalog, &schema, args.batch_size)?;
    save_predictions(&args.out, &records)?;
    println!("wrote {} predictions to {}", records.len(), args.out.display());
    Ok(())
}

fn cmd_baseline(args: BaselineArgs) -> anyhow::Result<()> {
    let mode: BaselineMode = args.mode.parse()?;
    let sessions = load_sessions(&args.sessions)?;
    let rates = match (mode, &args.train_sessions) {
        (BaselineMode::SkipRate, Some(path)) => {
            Some(compute_track_skip_rates(&load_sessions(path)?))
        }
        (BaselineMode::SkipRate, None) => {
            bail!("baseline skip_rate needs --train-sessions for the rate statistics")
        }
        _ => None,
    };
    let report = evaluate_baseline(mode, &sessions, rates.as_ref())?;
    emit_report(&report, args.json)
}

fn cmd_ensemble(args: EnsembleArgs) -> anyhow::Result<()> {
    let sessions = load_sessions(&args.sessions)?;
    let mut all: Vec<Vec<PredictionRecord>> = Vec::with_capacity(args.preds.len());
    for path in &args.preds {
        all.push(load_predictions(path)?);
    }
    let first = &all[0];
    for (i, records) in all.iter().enumerate().skip(1) {
        if records.len() != first.len() {
            bail!(
                "{} has {} records but {} has {}",
                args.preds[i].display(),
                records.len(),
                args.preds[0].display(),
                first.len()
            );
        }
    }

    let mut voted = Vec::with_capacity(first.len());
    for (i, lead) in first.iter().enumerate() {
        let mut votes = Vec::with_capacity(all.len());
        let mut prob_sum = vec![0.0; lead.probabilities.len()];
        for records in &all {
            let record = &records[i];
            if record.session_id != lead.session_id {
                bail!(
                    "prediction files disagree on session order at record {} ({} vs {})",
                    i + 1,
                    record.session_id,
                    lead.session_id
                );
            }
            for (acc, p) in prob_sum.iter_mut().zip(&record.probabilities) {
                *acc += p;
            }
            votes.push(record.predictions.clone());
        }
        voted.push(PredictionRecord {
            session_id: lead.session_id.clone(),
            predictions: majority_vote(&votes)?,
            probabilities: prob_sum.iter().map(|p| p / all.len() as f64).collect(),
        });
    }

    if let Some(out) = &args.out {
        save_predictions(out, &voted)?;
        println!("wrote {} voted predictions to {}", voted.len(), out.display());
    }
    let report = evaluate_predictions(&voted, &sessions)?;
    emit_report(&report, args.json)
}

fn cmd_gradcheck(args: GradcheckArgs) -> anyhow::Result<()> {
    let seed = resolve_seed(args.seed, &HashMap::new())?;
    let report = run_model_grad_check(args.step, args.tol, seed)?;
    println!("{:<22} {:>8} {:>14}  result", "parameter", "entries", "max rel err");
    for entry in &report.entries {
        println!(
            "{:<22} {:>8} {:>14.3e}  {}",
            entry.param,
            entry.entries,
            entry.max_rel_err,
            if entry.pass { "pass" } else { "FAIL" }
        );
    }
    if report.passed() {
        println!("gradient check passed at tol {:.1e}", report.tol);
        Ok(())
    } else {
        bail!("gradient check failed for {} parameter group(s)", report.failures().len())
    }
}
