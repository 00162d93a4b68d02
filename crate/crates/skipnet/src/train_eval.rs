//! Training loop, evaluation metrics (mean average accuracy and
//! first-prediction accuracy), the three reference baselines, and majority
//! voting across models.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{build_batch, FeatureSchema, SessionRecord, TrackCatalog};
use crate::error::{Error, Result};
use crate::model::{collect_grads, forward, predict_probs, ModelConfig, ModelParams};
use crate::nn::Adam;
use crate::tensor::Tape;

/// Probability threshold for the hard skip decision.
pub const DECISION_THRESHOLD: f64 = 0.5;

/// Position-weighted average accuracy for one session:
/// `AA = sum_i A(i) * L(i) / T`, where `A(i)` is the accuracy over the first
/// `i` predictions and `L(i)` is 1 when position `i` is correct.
pub fn session_average_accuracy(predictions: &[u8], labels: &[u8]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Contract(format!(
            "prediction length {} does not match label length {}",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Contract("session_average_accuracy needs at least one position".into()));
    }
    let mut correct = 0usize;
    let mut total = 0.0;
    for (i, (p, y)) in predictions.iter().zip(labels).enumerate() {
        if p == y {
            correct += 1;
            total += correct as f64 / (i + 1) as f64;
        }
    }
    Ok(total / predictions.len() as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub mean_average_accuracy: f64,
    pub first_prediction_accuracy: f64,
    pub sessions: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_session: Option<Vec<f64>>,
}

impl EvalReport {
    /// Aligned plain-text rendering.
    pub fn to_table(&self) -> String {
        format!(
            "{:<26} {:>8}\n{:<26} {:>8.4}\n{:<26} {:>8.4}\n",
            "sessions",
            self.sessions,
            "mean average accuracy",
            self.mean_average_accuracy,
            "first prediction accuracy",
            self.first_prediction_accuracy,
        )
    }
}

/// Score aligned (prediction, label) pairs, one pair per session.
pub fn evaluate_pairs(pairs: &[(Vec<u8>, Vec<u8>)], keep_per_session: bool) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty session set".into()));
    }
    let mut aa = Vec::with_capacity(pairs.len());
    let mut first_correct = 0usize;
    for (preds, labels) in pairs {
        aa.push(session_average_accuracy(preds, labels)?);
        if preds[0] == labels[0] {
            first_correct += 1;
        }
    }
    let maa = aa.iter().sum::<f64>() / aa.len() as f64;
    Ok(EvalReport {
        mean_average_accuracy: maa,
        first_prediction_accuracy: first_correct as f64 / pairs.len() as f64,
        sessions: pairs.len(),
        per_session: keep_per_session.then_some(aa),
    })
}

fn second_half_labels_or_err(session: &SessionRecord) -> Result<Vec<u8>> {
    session.second_half_labels().ok_or_else(|| {
        Error::Validation(format!(
            "session `{}` is missing second-half skip labels",
            session.session_id
        ))
    })
}

// ---------------------------------------------------------------------------
// Baselines

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMode {
    /// Predict every track to be skipped.
    AllSkip,
    /// Predict skip when the track's training-set skip rate exceeds 0.5
    /// (strictly); unseen tracks fall back to skip, the majority prior.
    SkipRate,
    /// Repeat the last first-half action over the whole second half.
    LastAction,
}

impl std::str::FromStr for BaselineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all_skip" => Ok(BaselineMode::AllSkip),
            "skip_rate" => Ok(BaselineMode::SkipRate),
            "last_action" => Ok(BaselineMode::LastAction),
            other => Err(Error::Config(format!(
                "unknown baseline mode `{other}` (expected all_skip, skip_rate, or last_action)"
            ))),
        }
    }
}

/// Second-half predictions for one session under a baseline rule.
pub fn baseline_predict(
    mode: BaselineMode,
    session: &SessionRecord,
    skip_rates: Option<&BTreeMap<String, f64>>,
) -> Result<Vec<u8>> {
    let (first, second) = session.split();
    match mode {
        BaselineMode::AllSkip => Ok(vec![1; second.len()]),
        BaselineMode::SkipRate => {
            let rates = skip_rates.ok_or_else(|| {
                Error::Config("baseline skip_rate requires training skip rates".into())
            })?;
            Ok(second
                .iter()
                .map(|t| match rates.get(&t.track_id) {
                    Some(&rate) => u8::from(rate > 0.5),
                    None => 1,
                })
                .collect())
        }
        BaselineMode::LastAction => {
            let last = first.last().and_then(|t| t.skip).ok_or_else(|| {
                Error::Validation(format!(
                    "session `{}` lacks the last first-half label required by last_action",
                    session.session_id
                ))
            })?;
            Ok(vec![u8::from(last); second.len()])
        }
    }
}

pub fn evaluate_baseline(
    mode: BaselineMode,
    sessions: &[SessionRecord],
    skip_rates: Option<&BTreeMap<String, f64>>,
) -> Result<EvalReport> {
    let mut pairs = Vec::with_capacity(sessions.len());
    for session in sessions {
        let preds = baseline_predict(mode, session, skip_rates)?;
        let labels = second_half_labels_or_err(session)?;
        pairs.push((preds, labels));
    }
    evaluate_pairs(&pairs, false)
}

// ---------------------------------------------------------------------------
// Ensembling

/// Per-position hard majority over an odd number of equally long vote vectors.
pub fn majority_vote(votes: &[Vec<u8>]) -> Result<Vec<u8>> {
    if votes.is_empty() || votes.len() % 2 == 0 {
        return Err(Error::Config(format!(
            "majority_vote needs an odd number of models, got {}",
            votes.len()
        )));
    }
    let len = votes[0].len();
    if votes.iter().any(|v| v.len() != len) {
        return Err(Error::Contract("vote vectors have unequal lengths".into()));
    }
    let need = votes.len() / 2 + 1;
    Ok((0..len)
        .map(|i| u8::from(votes.iter().filter(|v| v[i] == 1).count() >= need))
        .collect())
}

// ---------------------------------------------------------------------------
// Model predictions and evaluation

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub session_id: String,
    pub predictions: Vec<u8>,
    pub probabilities: Vec<f64>,
}

pub fn save_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PredictionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        records.push(record);
    }
    Ok(records)
}

/// Run the model over sessions in batches and emit per-session second-half
/// predictions with probabilities.
pub fn predict_sessions(
    params: &ModelParams,
    sessions: &[SessionRecord],
    catalog: &TrackCatalog,
    schema: &FeatureSchema,
    batch_size: usize,
) -> Result<Vec<PredictionRecord>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut records = Vec::with_capacity(sessions.len());
    for chunk in sessions.chunks(batch_size) {
        let batch = build_batch(chunk, catalog, schema)?;
        let probs = predict_probs(params, &batch, catalog)?;
        for (row, session) in chunk.iter().enumerate() {
            let len = batch.pred_len(row);
            let probabilities: Vec<f64> = (0..len).map(|t| probs.at(row, t)).collect();
            let predictions: Vec<u8> =
                probabilities.iter().map(|&p| u8::from(p > DECISION_THRESHOLD)).collect();
            records.push(PredictionRecord {
                session_id: session.session_id.clone(),
                predictions,
                probabilities,
            });
        }
    }
    Ok(records)
}

/// Score a trained model against labelled sessions.
pub fn evaluate_model(
    params: &ModelParams,
    sessions: &[SessionRecord],
    catalog: &TrackCatalog,
    schema: &FeatureSchema,
    batch_size: usize,
) -> Result<EvalReport> {
    let records = predict_sessions(params, sessions, catalog, schema, batch_size)?;
    let mut pairs = Vec::with_capacity(records.len());
    for (record, session) in records.iter().zip(sessions) {
        pairs.push((record.predictions.clone(), second_half_labels_or_err(session)?));
    }
    evaluate_pairs(&pairs, false)
}

/// Score prediction files against labelled sessions, matching by session id.
pub fn evaluate_predictions(
    records: &[PredictionRecord],
    sessions: &[SessionRecord],
) -> Result<EvalReport> {
    let by_id: BTreeMap<&str, &SessionRecord> =
        sessions.iter().map(|s| (s.session_id.as_str(), s)).collect();
    let mut pairs = Vec::with_capacity(records.len());
    for record in records {
        let session = by_id.get(record.session_id.as_str()).ok_or_else(|| {
            Error::Validation(format!("no session `{}` in the session file", record.session_id))
        })?;
        let labels = second_half_labels_or_err(session)?;
        if labels.len() != record.predictions.len() {
            return Err(Error::Contract(format!(
                "session `{}`: {} predictions for {} labelled positions",
                record.session_id,
                record.predictions.len(),
                labels.len()
            )));
        }
        pairs.push((record.predictions.clone(), labels));
    }
    evaluate_pairs(&pairs, false)
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    /// Save a checkpoint every N epochs (handled by the caller's callback).
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            batch_size: 300,
            learning_rate: 0.0005,
            epochs: 5,
            seed: 42,
            validation_fraction: 0.05,
            checkpoint_every: None,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("need at least 1 epoch".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation fraction must be in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub val_maa: f64,
    pub val_first: f64,
}

pub struct TrainOutcome {
    pub best: ModelParams,
    pub best_epoch: usize,
    pub best_val_maa: f64,
    pub history: Vec<EpochStats>,
    /// Every optimizer-step loss, in order.
    pub step_losses: Vec<f64>,
    pub optimizer: Adam,
}

/// Shuffle, split off a validation set, and run epochs of
/// forward/backward/Adam. The best-validation-MAA parameters are retained;
/// `on_epoch` sees each epoch's stats and the current parameters (for
/// cadence checkpointing).
pub fn train(
    run: &TrainRunConfig,
    model_cfg: &ModelConfig,
    sessions: &[SessionRecord],
    catalog: &TrackCatalog,
    schema: &FeatureSchema,
    mut on_epoch: impl FnMut(&EpochStats, &ModelParams),
) -> Result<TrainOutcome> {
    run.validate()?;
    if sessions.is_empty() {
        return Err(Error::Contract("cannot train on an empty session set".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut order: Vec<usize> = (0..sessions.len()).collect();
    order.shuffle(&mut rng);
    let val_count = if run.validation_fraction > 0.0 {
        ((sessions.len() as f64 * run.validation_fraction).round() as usize)
            .clamp(1, sessions.len() - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(val_count);
    let validation: Vec<SessionRecord> = val_idx.iter().map(|&i| sessions[i].clone()).collect();
    let mut train_pool: Vec<usize> = train_idx.to_vec();

    let mut params = ModelParams::init(
        model_cfg.clone(),
        catalog.len(),
        catalog.feature_dim(),
        schema.encoding_width(),
        run.seed,
    )?;
    let mut adam = Adam::new(run.learning_rate);

    let mut step_losses = Vec::new();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for epoch in 1..=run.epochs {
        train_pool.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in train_pool.chunks(run.batch_size) {
            let group: Vec<SessionRecord> = chunk.iter().map(|&i| sessions[i].clone()).collect();
            let batch = build_batch(&group, catalog, schema)?;
            let mut tape = Tape::new();
            let fwd = forward(&mut tape, &params, &batch, catalog, true)?;
            let loss_id = fwd.loss.expect("loss requested");
            let loss = tape.value(loss_id).data[0];
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became non-finite at step {}",
                    step_losses.len() + 1
                )));
            }
            tape.backward(loss_id)?;
            let grads = collect_grads(&tape, &fwd.bound);
            adam.step(&mut params.store, &grads)?;
            step_losses.push(loss);
            epoch_loss += loss;
            batches += 1;
        }

        let (val_maa, val_first) = if validation.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let report = evaluate_model(&params, &validation, catalog, schema, run.batch_size)?;
            (report.mean_average_accuracy, report.first_prediction_accuracy)
        };
        let stats = EpochStats {
            epoch,
            mean_train_loss: epoch_loss / batches.max(1) as f64,
            val_maa,
            val_first,
        };
        on_epoch(&stats, &params);
        history.push(stats);

        let score = if val_maa.is_nan() { -f64::INFINITY } else { val_maa };
        let improved = best.as_ref().map_or(true, |(b, _, _)| score > *b);
        if improved {
            best = Some((score, epoch, params.clone()));
        }
    }

    let (best_val_maa, best_epoch, best) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { best, best_epoch, best_val_maa, history, step_losses, optimizer: adam })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthParams};
    use rand::Rng;

    #[test]
    fn average_accuracy_hand_cases() {
        assert_eq!(session_average_accuracy(&[1, 1, 1], &[1, 1, 1]).unwrap(), 1.0);
        assert_eq!(session_average_accuracy(&[0, 0, 0], &[1, 1, 1]).unwrap(), 0.0);
        // Correctness pattern 1,1,0,1,0.
        let aa = session_average_accuracy(&[1, 1, 1, 1, 1], &[1, 1, 0, 1, 0]).unwrap();
        assert!((aa - 0.55).abs() < 1e-12, "{aa}");
        assert!(matches!(
            session_average_accuracy(&[1], &[1, 0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn flipping_a_wrong_position_never_lowers_aa() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let t = rng.gen_range(1..=10);
            let labels: Vec<u8> = (0..t).map(|_| rng.gen_range(0..2) as u8).collect();
            let mut preds: Vec<u8> = (0..t).map(|_| rng.gen_range(0..2) as u8).collect();
            let before = session_average_accuracy(&preds, &labels).unwrap();
            if let Some(i) = preds.iter().zip(&labels).position(|(p, y)| p != y) {
                preds[i] = labels[i];
                let after = session_average_accuracy(&preds, &labels).unwrap();
                assert!(after >= before, "{before} -> {after}");
            }
        }
    }

    #[test]
    fn evaluate_pairs_is_the_mean_of_session_aa() {
        let pairs = vec![(vec![1, 1, 1, 1, 1], vec![1, 1, 1, 1, 1]), (vec![0, 0, 0, 0, 0], vec![1, 1, 1, 1, 1])];
        let report = evaluate_pairs(&pairs, true).unwrap();
        assert_eq!(report.mean_average_accuracy, 0.5);
        assert_eq!(report.first_prediction_accuracy, 0.5);
        assert_eq!(report.per_session.unwrap(), vec![1.0, 0.0]);
        assert!(matches!(evaluate_pairs(&[], false), Err(Error::Contract(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pairs: Vec<(Vec<u8>, Vec<u8>)> = (0..50)
            .map(|_| {
                let t = rng.gen_range(5..=10);
                (
                    (0..t).map(|_| rng.gen_range(0..2) as u8).collect(),
                    (0..t).map(|_| rng.gen_range(0..2) as u8).collect(),
                )
            })
            .collect();
        let report = evaluate_pairs(&pairs, true).unwrap();
        let mean = report.per_session.as_ref().unwrap().iter().sum::<f64>() / 50.0;
        assert_eq!(report.mean_average_accuracy, mean);
    }

    fn labelled_session(id: &str, skips: &[bool]) -> SessionRecord {
        use crate::data::PlaybackTrack;
        SessionRecord {
            session_id: id.into(),
            premium: false,
            day_of_week: 1,
            tracks: skips
                .iter()
                .enumerate()
                .map(|(j, &s)| PlaybackTrack {
                    track_id: format!("t{j}"),
                    skip: Some(s),
                    playback: Default::default(),
                })
                .collect(),
        }
    }

    #[test]
    fn baseline_rules() {
        let mut skips = [false; 12];
        skips[5] = true; // last first-half position of m=12 (first half = 6)
        let s = labelled_session("a", &skips);

        assert_eq!(baseline_predict(BaselineMode::AllSkip, &s, None).unwrap(), vec![1; 6]);
        assert_eq!(baseline_predict(BaselineMode::LastAction, &s, None).unwrap(), vec![1; 6]);

        let mut flipped = skips;
        flipped[5] = false;
        let s0 = labelled_session("b", &flipped);
        assert_eq!(baseline_predict(BaselineMode::LastAction, &s0, None).unwrap(), vec![0; 6]);

        let mut rates = BTreeMap::new();
        rates.insert("t6".to_string(), 0.5);
        rates.insert("t7".to_string(), 0.51);
        rates.insert("t8".to_string(), 0.2);
        let preds = baseline_predict(BaselineMode::SkipRate, &s, Some(&rates)).unwrap();
        // t6 at exactly 0.5 -> 0 (strict), t7 -> 1, t8 -> 0, unseen t9..t11 -> 1.
        assert_eq!(preds, vec![0, 1, 0, 1, 1, 1]);

        assert!(matches!(
            baseline_predict(BaselineMode::SkipRate, &s, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn all_skip_on_all_one_labels_is_perfect() {
        let s = labelled_session("a", &[true; 10]);
        let report = evaluate_baseline(BaselineMode::AllSkip, &[s], None).unwrap();
        assert_eq!(report.mean_average_accuracy, 1.0);
        assert_eq!(report.first_prediction_accuracy, 1.0);
    }

    #[test]
    fn majority_vote_rules() {
        let votes = vec![vec![1, 0], vec![1, 0], vec![1, 1], vec![0, 1], vec![0, 0]];
        assert_eq!(majority_vote(&votes).unwrap(), vec![1, 0]);

        let same = vec![vec![1, 0, 1]; 5];
        assert_eq!(majority_vote(&same).unwrap(), vec![1, 0, 1]);

        assert!(matches!(majority_vote(&votes[..4]), Err(Error::Config(_))));
        assert!(matches!(majority_vote(&[]), Err(Error::Config(_))));

        // Permutation invariance and monotonicity on shuffled copies.
        let mut shuffled = votes.clone();
        shuffled.swap(0, 4);
        shuffled.swap(1, 3);
        assert_eq!(majority_vote(&votes).unwrap(), majority_vote(&shuffled).unwrap());

        let mut raised = votes.clone();
        raised[4] = vec![1, 1];
        let before = majority_vote(&votes).unwrap();
        let after = majority_vote(&raised).unwrap();
        assert!(before.iter().zip(&after).all(|(b, a)| a >= b));
    }

    #[test]
    fn prediction_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.jsonl");
        let records = vec![
            PredictionRecord {
                session_id: "a".into(),
                predictions: vec![1, 0, 1],
                probabilities: vec![0.9, 0.2, 0.7],
            },
            PredictionRecord {
                session_id: "b".into(),
                predictions: vec![0],
                probabilities: vec![0.1],
            },
        ];
        save_predictions(&path, &records).unwrap();
        let loaded = load_predictions(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].predictions, vec![1, 0, 1]);
        assert_eq!(loaded[1].probabilities, vec![0.1]);
    }

    #[test]
    fn training_is_seed_deterministic_and_loss_falls() {
        let corpus = synth_generate(&SynthParams {
            n_sessions: 60,
            n_tracks: 12,
            seed: 5,
            ..SynthParams::default()
        })
        .unwrap();
        let catalog = corpus.catalog().unwrap();
        let cfg = ModelConfig {
            learned_dim: 3,
            track_embed_dim: 8,
            session_lstm_size: 4,
            stacked_lstm_size: 6,
            head_hidden_size: 6,
            paper_padding: false,
        };
        let run = TrainRunConfig {
            batch_size: 20,
            epochs: 3,
            seed: 9,
            validation_fraction: 0.1,
            ..TrainRunConfig::default()
        };
        let outcome_a =
            train(&run, &cfg, &corpus.train, &catalog, &corpus.schema, |_, _| {}).unwrap();
        let outcome_b =
            train(&run, &cfg, &corpus.train, &catalog, &corpus.schema, |_, _| {}).unwrap();
        let bits_a: Vec<u64> = outcome_a.step_losses.iter().map(|l| l.to_bits()).collect();
        let bits_b: Vec<u64> = outcome_b.step_losses.iter().map(|l| l.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
        assert!(outcome_a.history.len() == 3);
        assert!(outcome_a.best_val_maa >= 0.0);
    }

    #[test]
    fn repeated_steps_on_one_batch_reduce_loss() {
        let corpus = synth_generate(&SynthParams {
            n_sessions: 8,
            n_tracks: 10,
            seed: 2,
            ..SynthParams::default()
        })
        .unwrap();
        let catalog = corpus.catalog().unwrap();
        let cfg = ModelConfig {
            learned_dim: 3,
            track_embed_dim: 8,
            session_lstm_size: 4,
            stacked_lstm_size: 6,
            head_hidden_size: 6,
            paper_padding: false,
        };
        let mut params =
            ModelParams::init(cfg, catalog.len(), catalog.feature_dim(), corpus.schema.encoding_width(), 3)
                .unwrap();
        let batch = build_batch(&corpus.train, &catalog, &corpus.schema).unwrap();
        let mut adam = Adam::new(0.01);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..40 {
            let mut tape = Tape::new();
            let fwd = forward(&mut tape, &params, &batch, &catalog, true).unwrap();
            let loss_id = fwd.loss.unwrap();
            last = tape.value(loss_id).data[0];
            first.get_or_insert(last);
            tape.backward(loss_id).unwrap();
            let grads = collect_grads(&tape, &fwd.bound);
            adam.step(&mut params.store, &grads).unwrap();
        }
        let first = first.unwrap();
        assert!(last < first * 0.8, "loss {first} -> {last}");
    }
}
