//! Data ingestion and batching: track catalogs, playback feature schemas,
//! session logs, fixed-length padded batches, and a seeded synthetic corpus
//! generator.
//!
//! File formats:
//! - track catalog: CSV with header `track_id,f_0,...,f_{F-1}`
//! - sessions: JSON lines, one object per session
//! - schema: JSON `{"categorical": {field: [vocab...]}, "numeric": [fields...]}`

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Width of the session meta encoding: premium(2) + length(11) + weekday(7).
pub const META_WIDTH: usize = 20;
/// One-hot width for absolute track positions (sessions hold at most 20 tracks).
pub const POSITION_SLOTS: usize = 20;
pub const MIN_SESSION_LEN: usize = 10;
pub const MAX_SESSION_LEN: usize = 20;
/// Fixed step count of the encoder and predictor RNNs.
pub const FIXED_STEPS: usize = 10;

const STD_GUARD: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Feature schema

/// One playback feature value as it appears in the session JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PlaybackValue {
    Text(String),
    Number(f64),
}

/// Ordered playback feature layout: categorical fields with their vocabularies
/// first, then numeric fields. The encoding width is stable for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub categorical: IndexMap<String, Vec<String>>,
    pub numeric: Vec<String>,
}

impl FeatureSchema {
    pub fn encoding_width(&self) -> usize {
        self.categorical.values().map(Vec::len).sum::<usize>() + self.numeric.len()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// SHA-256 of the canonical serialized schema; checkpoints store this so a
    /// model is never scored against a differently laid-out encoding.
    pub fn fingerprint(&self) -> String {
        let canon = serde_json::to_string(self).expect("schema serializes");
        let mut hasher = Sha256::new();
        hasher.update(canon.as_bytes());
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// One-hot encode the categorical fields in schema order, then append the
/// numeric fields in schema order.
pub fn encode_playback(
    playback: &BTreeMap<String, PlaybackValue>,
    schema: &FeatureSchema,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(schema.encoding_width());
    for (field, vocab) in &schema.categorical {
        let value = playback
            .get(field)
            .ok_or_else(|| Error::Validation(format!("missing playback field `{field}`")))?;
        let text = match value {
            PlaybackValue::Text(t) => t,
            PlaybackValue::Number(n) => {
                return Err(Error::Validation(format!(
                    "playback field `{field}` should be categorical, got number {n}"
                )))
            }
        };
        let hit = vocab.iter().position(|v| v == text).ok_or_else(|| {
            Error::Validation(format!("playback field `{field}` has out-of-vocabulary value `{text}`"))
        })?;
        let start = out.len();
        out.resize(start + vocab.len(), 0.0);
        out[start + hit] = 1.0;
    }
    for field in &schema.numeric {
        let value = playback
            .get(field)
            .ok_or_else(|| Error::Validation(format!("missing playback field `{field}`")))?;
        match value {
            PlaybackValue::Number(n) if n.is_finite() => out.push(*n),
            PlaybackValue::Number(n) => {
                return Err(Error::Validation(format!("playback field `{field}` is not finite: {n}")))
            }
            PlaybackValue::Text(t) => {
                return Err(Error::Validation(format!(
                    "playback field `{field}` should be numeric, got `{t}`"
                )))
            }
        }
    }
    Ok(out)
}

/// Inverse of [`encode_playback`] (used to check the encoding round-trips).
pub fn decode_playback(encoded: &[f64], schema: &FeatureSchema) -> Result<BTreeMap<String, PlaybackValue>> {
    if encoded.len() != schema.encoding_width() {
        return Err(Error::Dimension(format!(
            "encoded width {} does not match schema width {}",
            encoded.len(),
            schema.encoding_width()
        )));
    }
    let mut out = BTreeMap::new();
    let mut off = 0;
    for (field, vocab) in &schema.categorical {
        let block = &encoded[off..off + vocab.len()];
        let hot: Vec<usize> =
            block.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i).collect();
        if hot.len() != 1 || block[hot[0]] != 1.0 {
            return Err(Error::Validation(format!("block for `{field}` is not one-hot: {block:?}")));
        }
        out.insert(field.clone(), PlaybackValue::Text(vocab[hot[0]].clone()));
        off += vocab.len();
    }
    for field in &schema.numeric {
        out.insert(field.clone(), PlaybackValue::Number(encoded[off]));
        off += 1;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Sessions

/// One playback within a session. `skip` may be absent on evaluation data
/// (first half) and `playback` may be absent on second-half test tracks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlaybackTrack {
    pub track_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skip: Option<bool>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub playback: BTreeMap<String, PlaybackValue>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub premium: bool,
    pub day_of_week: u8,
    pub tracks: Vec<PlaybackTrack>,
}

impl SessionRecord {
    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.tracks.len();
        if !(MIN_SESSION_LEN..=MAX_SESSION_LEN).contains(&m) {
            return Err(Error::Validation(format!(
                "session `{}` has {m} tracks, expected {MIN_SESSION_LEN}-{MAX_SESSION_LEN}",
                self.session_id
            )));
        }
        if self.day_of_week > 6 {
            return Err(Error::Validation(format!(
                "session `{}` has day_of_week {}, expected 0-6",
                self.session_id, self.day_of_week
            )));
        }
        Ok(())
    }

    /// First `ceil(m/2)` tracks (full playback features) and the remaining
    /// `floor(m/2)` (ids and positions only, in the test regime).
    pub fn split(&self) -> (&[PlaybackTrack], &[PlaybackTrack]) {
        let first = (self.tracks.len() + 1) / 2;
        self.tracks.split_at(first)
    }

    /// Second-half skip labels, if all present.
    pub fn second_half_labels(&self) -> Option<Vec<u8>> {
        let (_, second) = self.split();
        second.iter().map(|t| t.skip.map(u8::from)).collect()
    }
}

/// Encode session meta info: one-hot(premium; 2) + one-hot(m-10; 11) +
/// one-hot(day; 7), in that order.
pub fn encode_meta(session: &SessionRecord) -> Result<Vec<f64>> {
    session.validate()?;
    let mut out = vec![0.0; META_WIDTH];
    out[usize::from(session.premium)] = 1.0;
    out[2 + (session.len() - MIN_SESSION_LEN)] = 1.0;
    out[13 + session.day_of_week as usize] = 1.0;
    Ok(out)
}

pub fn load_sessions(path: &Path) -> Result<Vec<SessionRecord>> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut sessions = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SessionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        sessions.push(record);
    }
    Ok(sessions)
}

pub fn save_sessions(path: &Path, sessions: &[SessionRecord]) -> Result<()> {
    let mut out = String::new();
    for s in sessions {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Track catalog

/// Track id -> standardized feature row, plus the standardization statistics
/// that produced it (always taken from the training-role catalog).
#[derive(Debug, Clone)]
pub struct TrackCatalog {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    pub feature_names: Vec<String>,
    features: Tensor,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl TrackCatalog {
    /// Load a catalog and standardize it with its own statistics.
    pub fn load(path: &Path) -> Result<Self> {
        let (ids, names, rows) = read_catalog_csv(path)?;
        Self::from_rows(ids, names, rows)
    }

    /// Load a catalog but standardize with previously computed statistics
    /// (evaluation against a training-time transform).
    pub fn load_with_stats(path: &Path, means: Vec<f64>, stds: Vec<f64>) -> Result<Self> {
        let (ids, names, rows) = read_catalog_csv(path)?;
        Self::from_rows_with_stats(ids, names, rows, means, stds)
    }

    pub fn from_rows(ids: Vec<String>, feature_names: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let (means, stds) = column_stats(&rows, feature_names.len());
        Self::from_rows_with_stats(ids, feature_names, rows, means, stds)
    }

    pub fn from_rows_with_stats(
        ids: Vec<String>,
        feature_names: Vec<String>,
        rows: Vec<Vec<f64>>,
        means: Vec<f64>,
        stds: Vec<f64>,
    ) -> Result<Self> {
        let f = feature_names.len();
        if means.len() != f || stds.len() != f {
            return Err(Error::Dimension(format!(
                "statistics width {}/{} does not match feature count {f}",
                means.len(),
                stds.len()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate track id `{id}`")));
            }
        }
        let mut data = Vec::with_capacity(ids.len() * f);
        for row in &rows {
            for (j, &v) in row.iter().enumerate() {
                if stds[j] > STD_GUARD {
                    data.push((v - means[j]) / stds[j]);
                } else {
                    data.push(0.0);
                }
            }
        }
        Ok(TrackCatalog {
            ids,
            index,
            feature_names,
            features: Tensor::new(data, vec![rows.len(), f]),
            means,
            stds,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn track_ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index_of(&self, track_id: &str) -> Result<usize> {
        self.index
            .get(track_id)
            .copied()
            .ok_or_else(|| Error::UnknownTrack(track_id.to_string()))
    }

    /// Standardized feature row by dense index.
    pub fn feature_row(&self, index: usize) -> &[f64] {
        self.features.row(index)
    }

    /// Gather standardized rows into a `[n x F]` tensor.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let f = self.feature_dim();
        let mut data = Vec::with_capacity(indices.len() * f);
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
        }
        Tensor::new(data, vec![indices.len(), f])
    }

}

fn column_stats(rows: &[Vec<f64>], width: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len().max(1) as f64;
    let mut means = vec![0.0; width];
    for row in rows {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= n;
    }
    let mut vars = vec![0.0; width];
    for row in rows {
        for ((s, v), m) in vars.iter_mut().zip(row).zip(&means) {
            let d = v - m;
            *s += d * d;
        }
    }
    let stds: Vec<f64> = vars.iter().map(|s| (s / n).sqrt()).collect();
    (means, stds)
}

fn read_catalog_csv(path: &Path) -> Result<(Vec<String>, Vec<String>, Vec<Vec<f64>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::Parse { line: 0, msg: e.to_string() })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
        .clone();
    if headers.is_empty() || &headers[0] != "track_id" {
        return Err(Error::Parse { line: 1, msg: "first column must be `track_id`".into() });
    }
    let feature_names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::Parse { line, msg: e.to_string() }
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let id = record
            .get(0)
            .ok_or_else(|| Error::Parse { line, msg: "missing track_id".into() })?
            .to_string();
        if let Some(first) = seen.insert(id.clone(), line) {
            return Err(Error::Parse {
                line,
                msg: format!("duplicate track id `{id}` (first seen at line {first})"),
            });
        }
        let mut row = Vec::with_capacity(feature_names.len());
        for (j, cell) in record.iter().skip(1).enumerate() {
            let value: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("non-numeric cell `{cell}` in column `{}`", feature_names[j]),
            })?;
            row.push(value);
        }
        ids.push(id);
        rows.push(row);
    }
    Ok((ids, feature_names, rows))
}

/// Write raw (unstandardized) catalog rows as CSV.
pub fn write_catalog_csv(
    path: &Path,
    ids: &[String],
    feature_names: &[String],
    rows: &[Vec<f64>],
) -> Result<()> {
    let mut out = String::from("track_id");
    for name in feature_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (id, row) in ids.iter().zip(rows) {
        out.push_str(id);
        for v in row {
            out.push(',');
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Batches

/// Fixed-length padded arrays for a set of sessions, step-major where the
/// model consumes them stepwise.
///
/// Encoder steps are right-aligned (pre-padding), predictor steps left-aligned
/// (post-padding); `mask[row, t] = 0` marks a padded slot. The full-session
/// sequence feeds the session encoder and is left-aligned over
/// `sess_steps` slots.
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    pub enc_steps: usize,
    pub pred_steps: usize,
    pub sess_steps: usize,
    pub session_ids: Vec<String>,
    pub meta: Tensor,
    pub sess_ids: Vec<Vec<usize>>,
    pub sess_mask: Tensor,
    pub enc_ids: Vec<Vec<usize>>,
    pub enc_playback: Vec<Tensor>,
    pub enc_mask: Tensor,
    pub pred_ids: Vec<Vec<usize>>,
    pub pred_pos: Vec<Tensor>,
    pub pred_mask: Tensor,
    /// Second-half labels, present when every batched session carries them.
    pub labels: Option<Tensor>,
}

impl Batch {
    pub fn enc_len(&self, row: usize) -> usize {
        (0..self.enc_steps).filter(|&t| self.enc_mask.at(row, t) != 0.0).count()
    }

    pub fn pred_len(&self, row: usize) -> usize {
        (0..self.pred_steps).filter(|&t| self.pred_mask.at(row, t) != 0.0).count()
    }

    /// Unpadded encoder-side track indices for one row.
    pub fn enc_real_ids(&self, row: usize) -> Vec<usize> {
        (0..self.enc_steps)
            .filter(|&t| self.enc_mask.at(row, t) != 0.0)
            .map(|t| self.enc_ids[t][row])
            .collect()
    }

    /// Unpadded predictor-side track indices for one row.
    pub fn pred_real_ids(&self, row: usize) -> Vec<usize> {
        (0..self.pred_steps)
            .filter(|&t| self.pred_mask.at(row, t) != 0.0)
            .map(|t| self.pred_ids[t][row])
            .collect()
    }
}

/// Build a batch with the standard fixed windows: 10 encoder steps, 10
/// predictor steps, 20 session steps.
pub fn build_batch(
    sessions: &[SessionRecord],
    catalog: &TrackCatalog,
    schema: &FeatureSchema,
) -> Result<Batch> {
    build_batch_custom(sessions, catalog, schema, FIXED_STEPS, FIXED_STEPS, MAX_SESSION_LEN)
}

/// Build a batch with explicit window sizes (tests use tight windows to check
/// padding invariance).
pub fn build_batch_custom(
    sessions: &[SessionRecord],
    catalog: &TrackCatalog,
    schema: &FeatureSchema,
    enc_steps: usize,
    pred_steps: usize,
    sess_steps: usize,
) -> Result<Batch> {
    if sessions.is_empty() {
        return Err(Error::Contract("cannot build a batch of 0 sessions".into()));
    }
    let b = sessions.len();
    let p_width = schema.encoding_width();

    let mut meta = Vec::with_capacity(b * META_WIDTH);
    let mut sess_ids = vec![vec![0usize; b]; sess_steps];
    let mut sess_mask = Tensor::zeros(vec![b, sess_steps]);
    let mut enc_ids = vec![vec![0usize; b]; enc_steps];
    let mut enc_playback = vec![Tensor::zeros(vec![b, p_width]); enc_steps];
    let mut enc_mask = Tensor::zeros(vec![b, enc_steps]);
    let mut pred_ids = vec![vec![0usize; b]; pred_steps];
    let mut pred_pos = vec![Tensor::zeros(vec![b, POSITION_SLOTS]); pred_steps];
    let mut pred_mask = Tensor::zeros(vec![b, pred_steps]);
    let mut labels = Tensor::zeros(vec![b, pred_steps]);
    let mut all_labelled = true;

    for (row, session) in sessions.iter().enumerate() {
        session.validate()?;
        meta.extend(encode_meta(session)?);
        let (first, second) = session.split();
        if first.len() > enc_steps || second.len() > pred_steps || session.len() > sess_steps {
            return Err(Error::Contract(format!(
                "session `{}` does not fit windows enc={enc_steps} pred={pred_steps} sess={sess_steps}",
                session.session_id
            )));
        }

        for (j, track) in session.tracks.iter().enumerate() {
            sess_ids[j][row] = catalog.index_of(&track.track_id)?;
            sess_mask.data[row * sess_steps + j] = 1.0;
        }

        // Encoder: right-aligned.
        let offset = enc_steps - first.len();
        for (j, track) in first.iter().enumerate() {
            let t = offset + j;
            enc_ids[t][row] = catalog.index_of(&track.track_id)?;
            enc_mask.data[row * enc_steps + t] = 1.0;
            let encoded = encode_playback(&track.playback, schema)?;
            enc_playback[t].data[row * p_width..(row + 1) * p_width].copy_from_slice(&encoded);
        }

        // Predictor: left-aligned; positions are absolute in the session.
        for (j, track) in second.iter().enumerate() {
            pred_ids[j][row] = catalog.index_of(&track.track_id)?;
            pred_mask.data[row * pred_steps + j] = 1.0;
            pred_pos[j].data[row * POSITION_SLOTS + first.len() + j] = 1.0;
            match track.skip {
                Some(skip) => labels.data[row * pred_steps + j] = f64::from(u8::from(skip)),
                None => all_labelled = false,
            }
        }
    }

    Ok(Batch {
        size: b,
        enc_steps,
        pred_steps,
        sess_steps,
        session_ids: sessions.iter().map(|s| s.session_id.clone()).collect(),
        meta: Tensor::new(meta, vec![b, META_WIDTH]),
        sess_ids,
        sess_mask,
        enc_ids,
        enc_playback,
        enc_mask,
        pred_ids,
        pred_pos,
        pred_mask,
        labels: all_labelled.then_some(labels),
    })
}

/// Skip rate per track over all positions of the given sessions; tracks never
/// observed are absent.
pub fn compute_track_skip_rates(sessions: &[SessionRecord]) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for session in sessions {
        for track in &session.tracks {
            if let Some(skip) = track.skip {
                let entry = counts.entry(track.track_id.clone()).or_insert((0, 0));
                entry.0 += u64::from(skip);
                entry.1 += 1;
            }
        }
    }
    counts.into_iter().map(|(id, (s, n))| (id, s as f64 / n as f64)).collect()
}

// ---------------------------------------------------------------------------
// Synthetic corpus

const LATENT_DIM: usize = 8;
const FEATURE_DIM: usize = 12;
const START_REASONS: [&str; 4] = ["trackdone", "fwdbtn", "backbtn", "playbtn"];
const CONTEXT_TYPES: [&str; 3] = ["playlist", "radio", "album"];

/// Generator controls. Tracks get latent taste vectors whose observable
/// features are a noisy linear map; per session a user taste vector and a
/// position slope are drawn, and each skip is Bernoulli of
/// `sigmoid(base + taste_weight*<user,track> + position term + momentum_weight*prev)`.
/// Playback categoricals derive from the previous step's realized skip, so the
/// observed history is informative.
#[derive(Debug, Clone)]
pub struct SynthParams {
    pub n_sessions: usize,
    pub n_tracks: usize,
    pub n_test_sessions: usize,
    pub seed: u64,
    pub taste_weight: f64,
    pub position_weight: f64,
    pub momentum_weight: f64,
    /// Biases which tracks a user's session contains toward their taste.
    pub selection_weight: f64,
    /// Session-level skippiness: the user-taste component along a constant
    /// track channel, scaled relative to `taste_weight`.
    pub mood_weight: f64,
    pub base_logit: f64,
    pub feature_noise: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_sessions: 1000,
            n_tracks: 200,
            n_test_sessions: 0,
            seed: 0,
            taste_weight: 2.0,
            position_weight: 0.8,
            momentum_weight: 1.0,
            selection_weight: 1.0,
            mood_weight: 0.6,
            base_logit: 0.0,
            feature_noise: 0.1,
        }
    }
}

impl SynthParams {
    fn validate(&self) -> Result<()> {
        if self.n_sessions < 1 {
            return Err(Error::Config("need at least 1 session".into()));
        }
        if self.n_tracks < 2 {
            return Err(Error::Config("need at least 2 tracks".into()));
        }
        for (name, v) in [
            ("taste_weight", self.taste_weight),
            ("position_weight", self.position_weight),
            ("momentum_weight", self.momentum_weight),
            ("selection_weight", self.selection_weight),
            ("mood_weight", self.mood_weight),
            ("base_logit", self.base_logit),
            ("feature_noise", self.feature_noise),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite, got {v}")));
            }
        }
        Ok(())
    }
}

/// A generated corpus: raw catalog rows (standardization happens at load),
/// the playback schema, and train/test session logs.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub track_ids: Vec<String>,
    pub feature_names: Vec<String>,
    pub features: Vec<Vec<f64>>,
    pub schema: FeatureSchema,
    pub train: Vec<SessionRecord>,
    pub test: Vec<SessionRecord>,
}

impl SynthCorpus {
    pub fn catalog(&self) -> Result<TrackCatalog> {
        TrackCatalog::from_rows(
            self.track_ids.clone(),
            self.feature_names.clone(),
            self.features.clone(),
        )
    }

    /// Write `catalog.csv`, `sessions.jsonl`, `schema.json` (and
    /// `sessions_test.jsonl` when test sessions exist) into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let catalog = dir.join("catalog.csv");
        write_catalog_csv(&catalog, &self.track_ids, &self.feature_names, &self.features)?;
        let sessions = dir.join("sessions.jsonl");
        save_sessions(&sessions, &self.train)?;
        let schema = dir.join("schema.json");
        self.schema.save(&schema)?;
        let mut written = vec![catalog, sessions, schema];
        if !self.test.is_empty() {
            let test = dir.join("sessions_test.jsonl");
            save_sessions(&test, &self.test)?;
            written.push(test);
        }
        Ok(written)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn synth_schema() -> FeatureSchema {
    let mut categorical = IndexMap::new();
    categorical.insert(
        "start_reason".to_string(),
        START_REASONS.iter().map(|s| s.to_string()).collect(),
    );
    categorical.insert(
        "context_type".to_string(),
        CONTEXT_TYPES.iter().map(|s| s.to_string()).collect(),
    );
    FeatureSchema { categorical, numeric: vec!["pause_before_play".to_string()] }
}

/// Generate a corpus, fully determined by `params.seed`.
pub fn synth_generate(params: &SynthParams) -> Result<SynthCorpus> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let scale = 1.0 / (LATENT_DIM as f64).sqrt();

    // Observable features are a fixed noisy linear map of the track latents.
    let mix: Vec<f64> = (0..FEATURE_DIM * LATENT_DIM).map(|_| normal(&mut rng) * scale).collect();

    let mut latents = Vec::with_capacity(params.n_tracks);
    let mut track_ids = Vec::with_capacity(params.n_tracks);
    let mut features = Vec::with_capacity(params.n_tracks);
    for t in 0..params.n_tracks {
        track_ids.push(format!("t{t:05}"));
        let z: Vec<f64> = (0..LATENT_DIM).map(|_| normal(&mut rng)).collect();
        let mut row = Vec::with_capacity(FEATURE_DIM);
        for f in 0..FEATURE_DIM {
            let dot: f64 =
                (0..LATENT_DIM).map(|k| mix[f * LATENT_DIM + k] * z[k]).sum();
            row.push(dot + params.feature_noise * normal(&mut rng));
        }
        latents.push(z);
        features.push(row);
    }

    let schema = synth_schema();
    let make_sessions = |count: usize, start_index: usize, rng: &mut ChaCha8Rng| {
        let mut sessions = Vec::with_capacity(count);
        for s in 0..count {
            let user: Vec<f64> = (0..LATENT_DIM).map(|_| normal(rng)).collect();
            let mood = normal(rng);
            let m = rng.gen_range(MIN_SESSION_LEN..=MAX_SESSION_LEN);
            let premium = rng.gen_bool(0.7);
            let day_of_week = rng.gen_range(0..7u8);
            let slope: f64 = rng.gen_range(0.5..1.5);
            let context = CONTEXT_TYPES[rng.gen_range(0..CONTEXT_TYPES.len())];

            // Taste-biased track selection (with replacement).
            let affinities: Vec<f64> = latents
                .iter()
                .map(|z| user.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let mut cumulative = Vec::with_capacity(affinities.len());
            let mut total = 0.0;
            for &a in &affinities {
                total += (params.selection_weight * a).exp();
                cumulative.push(total);
            }
            // Mean affinity under the selection distribution; centering the
            // taste term on it keeps the base skip rate near sigmoid(base)
            // regardless of how strong the selection bias is.
            let mean_selected: f64 = affinities
                .iter()
                .map(|&a| (params.selection_weight * a).exp() * a)
                .sum::<f64>()
                / total;

            let mut tracks = Vec::with_capacity(m);
            let mut prev_skip: Option<bool> = None;
            for j in 0..m {
                let draw = rng.gen_range(0.0..total);
                let pick = cumulative.partition_point(|&c| c <= draw).min(affinities.len() - 1);

                let position = 2.0 * j as f64 / (m - 1) as f64 - 1.0;
                let mut logit = params.base_logit
                    - params.taste_weight * (affinities[pick] - mean_selected + params.mood_weight * mood)
                    + params.position_weight * slope * position;
                if let Some(prev) = prev_skip {
                    logit += params.momentum_weight * if prev { 1.0 } else { -1.0 };
                }
                let skip = rng.gen_bool(sigmoid(logit));

                let start_reason = match prev_skip {
                    None => {
                        if rng.gen_bool(0.9) { "playbtn" } else { START_REASONS[rng.gen_range(0..3)] }
                    }
                    Some(true) => {
                        if rng.gen_bool(0.85) { "fwdbtn" } else { START_REASONS[rng.gen_range(0..4)] }
                    }
                    Some(false) => {
                        if rng.gen_bool(0.85) { "trackdone" } else { START_REASONS[rng.gen_range(0..4)] }
                    }
                };
                let pause = 0.1
                    + if prev_skip == Some(true) { 0.8 } else { 0.0 }
                    + normal(rng).abs() * 0.2;

                let mut playback = BTreeMap::new();
                playback.insert("start_reason".into(), PlaybackValue::Text(start_reason.into()));
                playback.insert("context_type".into(), PlaybackValue::Text(context.into()));
                playback.insert("pause_before_play".into(), PlaybackValue::Number(pause));

                tracks.push(PlaybackTrack {
                    track_id: track_ids[pick].clone(),
                    skip: Some(skip),
                    playback,
                });
                prev_skip = Some(skip);
            }
            sessions.push(SessionRecord {
                session_id: format!("s{:06}", start_index + s),
                premium,
                day_of_week,
                tracks,
            });
        }
        sessions
    };

    let train = make_sessions(params.n_sessions, 0, &mut rng);
    let test = make_sessions(params.n_test_sessions, params.n_sessions, &mut rng);

    Ok(SynthCorpus {
        track_ids,
        feature_names: (0..FEATURE_DIM).map(|f| format!("f_{f}")).collect(),
        features,
        schema,
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_schema() -> FeatureSchema {
        let mut categorical = IndexMap::new();
        categorical.insert("kind".to_string(), vec!["a".into(), "b".into(), "c".into()]);
        FeatureSchema { categorical, numeric: vec!["level".into()] }
    }

    fn toy_catalog(n: usize) -> TrackCatalog {
        let ids: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64, 1.0 - i as f64]).collect();
        TrackCatalog::from_rows(ids, vec!["f_0".into(), "f_1".into()], rows).unwrap()
    }

    fn toy_session(id: &str, m: usize, skips: &[bool]) -> SessionRecord {
        assert_eq!(skips.len(), m);
        let tracks = (0..m)
            .map(|j| {
                let mut playback = BTreeMap::new();
                playback.insert(
                    "kind".to_string(),
                    PlaybackValue::Text(["a", "b", "c"][j % 3].to_string()),
                );
                playback.insert("level".to_string(), PlaybackValue::Number(j as f64 * 0.5));
                PlaybackTrack { track_id: format!("t{}", j % 4), skip: Some(skips[j]), playback }
            })
            .collect();
        SessionRecord { session_id: id.into(), premium: true, day_of_week: 2, tracks }
    }

    #[test]
    fn standardization_matches_hand_zscores() {
        let catalog = TrackCatalog::from_rows(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["f_0".into(), "f_1".into()],
            vec![vec![1.0, 5.0], vec![2.0, 5.0], vec![3.0, 5.0]],
        )
        .unwrap();
        let expect = [-1.22474, 0.0, 1.22474];
        for (i, e) in expect.iter().enumerate() {
            assert!((catalog.feature_row(i)[0] - e).abs() < 1e-5);
            assert_eq!(catalog.feature_row(i)[1], 0.0, "constant column maps to zero");
        }
    }

    #[test]
    fn single_track_catalog_standardizes_to_zero() {
        let catalog = TrackCatalog::from_rows(
            vec!["only".into()],
            vec!["f_0".into()],
            vec![vec![42.0]],
        )
        .unwrap();
        assert_eq!(catalog.feature_row(0), &[0.0]);
    }

    #[test]
    fn standardized_columns_have_zero_mean_unit_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<f64>> =
            (0..50).map(|_| (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();
        let ids: Vec<String> = (0..50).map(|i| format!("t{i}")).collect();
        let names: Vec<String> = (0..4).map(|j| format!("f_{j}")).collect();
        let catalog = TrackCatalog::from_rows(ids, names, rows).unwrap();
        for j in 0..4 {
            let col: Vec<f64> = (0..50).map(|i| catalog.feature_row(i)[j]).collect();
            let mean: f64 = col.iter().sum::<f64>() / 50.0;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 50.0;
            assert!(mean.abs() <= 1e-9, "column {j} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() <= 1e-9, "column {j} std {}", var.sqrt());
        }
    }

    #[test]
    fn catalog_csv_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();

        let dup = dir.path().join("dup.csv");
        fs::write(&dup, "track_id,f_0\na,1.0\nb,2.0\na,3.0\n").unwrap();
        match TrackCatalog::load(&dup) {
            Err(Error::Parse { line: 4, msg }) => assert!(msg.contains("duplicate"), "{msg}"),
            other => panic!("expected duplicate-id parse error, got {other:?}"),
        }

        let bad = dir.path().join("bad.csv");
        fs::write(&bad, "track_id,f_0\na,1.0\nb,oops\n").unwrap();
        match TrackCatalog::load(&bad) {
            Err(Error::Parse { line: 3, msg }) => assert!(msg.contains("non-numeric"), "{msg}"),
            other => panic!("expected non-numeric parse error, got {other:?}"),
        }

        let ragged = dir.path().join("ragged.csv");
        fs::write(&ragged, "track_id,f_0,f_1\na,1.0,2.0\nb,1.0\n").unwrap();
        match TrackCatalog::load(&ragged) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected ragged-row parse error, got {other:?}"),
        }
    }

    #[test]
    fn meta_encoding_layout() {
        let s = toy_session("x", 10, &[false; 10]);
        let meta = encode_meta(&s).unwrap();
        // premium=true -> 1, m=10 -> 2, day=2 -> 15
        let hot: Vec<usize> =
            meta.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i).collect();
        assert_eq!(hot, vec![1, 2, 15]);

        let mut s0 = toy_session("y", 10, &[false; 10]);
        s0.premium = true;
        s0.day_of_week = 0;
        let meta = encode_meta(&s0).unwrap();
        let hot: Vec<usize> =
            meta.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i).collect();
        assert_eq!(hot, vec![1, 2, 13]);

        let s20 = toy_session("z", 20, &[true; 20]);
        let meta = encode_meta(&s20).unwrap();
        assert_eq!(meta[12], 1.0, "m=20 hits the last length slot");
        assert_eq!(meta.iter().filter(|&&v| v == 1.0).count(), 3);
    }

    #[test]
    fn meta_rejects_out_of_range_length() {
        let s = toy_session("short", 9, &[false; 9]);
        assert!(matches!(encode_meta(&s), Err(Error::Validation(_))));
        let s = toy_session("long", 21, &[false; 21]);
        assert!(matches!(encode_meta(&s), Err(Error::Validation(_))));
    }

    #[test]
    fn playback_encoding_layout_and_roundtrip() {
        let schema = toy_schema();
        let mut playback = BTreeMap::new();
        playback.insert("kind".to_string(), PlaybackValue::Text("b".into()));
        playback.insert("level".to_string(), PlaybackValue::Number(0.5));
        let encoded = encode_playback(&playback, &schema).unwrap();
        assert_eq!(encoded, vec![0.0, 1.0, 0.0, 0.5]);
        assert_eq!(decode_playback(&encoded, &schema).unwrap(), playback);

        let nums_only = FeatureSchema { categorical: IndexMap::new(), numeric: vec!["level".into()] };
        let mut playback = BTreeMap::new();
        playback.insert("level".to_string(), PlaybackValue::Number(0.5));
        assert_eq!(encode_playback(&playback, &nums_only).unwrap(), vec![0.5]);

        let mut categorical = IndexMap::new();
        categorical.insert("flag".to_string(), vec!["on".into(), "off".into()]);
        let schema2 = FeatureSchema { categorical, numeric: vec!["a".into(), "b".into()] };
        let mut playback = BTreeMap::new();
        playback.insert("flag".to_string(), PlaybackValue::Text("on".into()));
        playback.insert("a".to_string(), PlaybackValue::Number(3.0));
        playback.insert("b".to_string(), PlaybackValue::Number(-1.0));
        assert_eq!(encode_playback(&playback, &schema2).unwrap(), vec![1.0, 0.0, 3.0, -1.0]);
    }

    #[test]
    fn playback_rejects_out_of_vocab_by_name() {
        let schema = toy_schema();
        let mut playback = BTreeMap::new();
        playback.insert("kind".to_string(), PlaybackValue::Text("zzz".into()));
        playback.insert("level".to_string(), PlaybackValue::Number(0.0));
        let err = encode_playback(&playback, &schema).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("kind") && msg.contains("zzz"), "{msg}");
    }

    #[test]
    fn split_lengths() {
        for (m, first, second) in [(20, 10, 10), (11, 6, 5), (10, 5, 5)] {
            let s = toy_session("s", m, &vec![false; m]);
            let (a, b) = s.split();
            assert_eq!((a.len(), b.len()), (first, second));
        }
        for m in MIN_SESSION_LEN..=MAX_SESSION_LEN {
            let s = toy_session("s", m, &vec![true; m]);
            let (a, b) = s.split();
            assert_eq!(a.len() + b.len(), m);
            assert!(a.len() >= b.len() && a.len() - b.len() <= 1);
        }
    }

    #[test]
    fn batch_masks_follow_padding_rules() {
        let catalog = toy_catalog(4);
        let schema = toy_schema();
        let s = toy_session("m14", 14, &[true; 14]);
        let batch = build_batch(&[s], &catalog, &schema).unwrap();
        let enc: Vec<f64> = (0..10).map(|t| batch.enc_mask.at(0, t)).collect();
        assert_eq!(enc, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let pred: Vec<f64> = (0..10).map(|t| batch.pred_mask.at(0, t)).collect();
        assert_eq!(pred, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);

        let s = toy_session("m20", 20, &[false; 20]);
        let batch = build_batch(&[s], &catalog, &schema).unwrap();
        assert!( (0..10).all(|t| batch.enc_mask.at(0, t) == 1.0) );
        assert!( (0..10).all(|t| batch.pred_mask.at(0, t) == 1.0) );
    }

    #[test]
    fn batch_roundtrips_the_split_and_positions() {
        let catalog = toy_catalog(4);
        let schema = toy_schema();
        let s = toy_session("m13", 13, &[true, false, true, false, true, false, true, false, true, false, true, false, true]);
        let (first, second) = s.split();
        let batch = build_batch(std::slice::from_ref(&s), &catalog, &schema).unwrap();

        let enc_ids = batch.enc_real_ids(0);
        let want: Vec<usize> =
            first.iter().map(|t| catalog.index_of(&t.track_id).unwrap()).collect();
        assert_eq!(enc_ids, want);

        let pred_ids = batch.pred_real_ids(0);
        let want: Vec<usize> =
            second.iter().map(|t| catalog.index_of(&t.track_id).unwrap()).collect();
        assert_eq!(pred_ids, want);

        // Positions are absolute: second-half step j sits at ceil(m/2)+j.
        for (j, pos) in batch.pred_pos.iter().enumerate().take(second.len()) {
            let hot: Vec<usize> = (0..POSITION_SLOTS)
                .filter(|&k| pos.data[k] != 0.0)
                .collect();
            assert_eq!(hot, vec![7 + j]);
        }

        // Labels land on the left-aligned slots.
        let labels = batch.labels.as_ref().unwrap();
        for (j, track) in second.iter().enumerate() {
            assert_eq!(labels.at(0, j), f64::from(u8::from(track.skip.unwrap())));
        }
    }

    #[test]
    fn batch_is_permutation_equivariant() {
        let catalog = toy_catalog(4);
        let schema = toy_schema();
        let a = toy_session("a", 12, &[true; 12]);
        let b = toy_session("b", 17, &[false; 17]);
        let c = toy_session("c", 10, &[true, false, true, false, true, false, true, false, true, false]);
        let fwd = build_batch(&[a.clone(), b.clone(), c.clone()], &catalog, &schema).unwrap();
        let rev = build_batch(&[c, b, a], &catalog, &schema).unwrap();
        for row in 0..3 {
            assert_eq!(fwd.session_ids[row], rev.session_ids[2 - row]);
            assert_eq!(fwd.enc_real_ids(row), rev.enc_real_ids(2 - row));
            assert_eq!(fwd.meta.row(row), rev.meta.row(2 - row));
            for t in 0..10 {
                assert_eq!(fwd.enc_playback[t].row(row), rev.enc_playback[t].row(2 - row));
            }
        }
    }

    #[test]
    fn batch_rejects_empty_and_unknown_ids() {
        let catalog = toy_catalog(2);
        let schema = toy_schema();
        assert!(matches!(build_batch(&[], &catalog, &schema), Err(Error::Contract(_))));

        let s = toy_session("s", 10, &[false; 10]); // references t2, t3
        match build_batch(&[s], &catalog, &schema) {
            Err(Error::UnknownTrack(id)) => assert_eq!(id, "t2"),
            other => panic!("expected unknown track, got {other:?}"),
        }
    }

    #[test]
    fn skip_rates_match_hand_counts() {
        let mut sessions = vec![
            toy_session("a", 10, &[true, true, true, false, true, false, false, false, true, true]),
            toy_session("b", 10, &[false, true, false, false, false, false, true, true, false, false]),
            toy_session("c", 10, &[true; 10]),
        ];
        // toy_session uses track t{j%4}; count by hand for t0 (positions 0,4,8).
        let rates = compute_track_skip_rates(&sessions);
        let t0_skips = [true, true, true, false, false, false, true, true, true] // a0,a4,a8,b0,b4,b8,c0,c4,c8
            .iter()
            .filter(|&&s| s)
            .count() as f64;
        assert!((rates["t0"] - t0_skips / 9.0).abs() < 1e-12);

        // A track skipped 3 of 4 times and a never-skipped track.
        sessions[0].tracks[0].track_id = "fresh".into();
        sessions[0].tracks[4].track_id = "fresh".into();
        sessions[1].tracks[0].track_id = "fresh".into();
        sessions[1].tracks[4].track_id = "fresh".into();
        sessions[0].tracks[0].skip = Some(true);
        sessions[0].tracks[4].skip = Some(true);
        sessions[1].tracks[0].skip = Some(true);
        sessions[1].tracks[4].skip = Some(false);
        let rates = compute_track_skip_rates(&sessions);
        assert_eq!(rates["fresh"], 0.75);

        sessions[1].tracks[8].track_id = "calm".into();
        sessions[1].tracks[8].skip = Some(false);
        let rates = compute_track_skip_rates(&sessions);
        assert_eq!(rates["calm"], 0.0);
    }

    #[test]
    fn sessions_roundtrip_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sessions.jsonl");
        let sessions = vec![toy_session("a", 11, &[true; 11]), toy_session("b", 10, &[false; 10])];
        save_sessions(&path, &sessions).unwrap();
        let loaded = load_sessions(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].session_id, "a");
        assert_eq!(loaded[0].tracks.len(), 11);
        assert_eq!(loaded[1].tracks[3].skip, Some(false));
        assert_eq!(loaded[0].tracks[0].playback["kind"], PlaybackValue::Text("a".into()));
    }

    #[test]
    fn schema_fingerprint_is_stable_and_order_sensitive() {
        let a = toy_schema();
        let b = toy_schema();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let mut c = toy_schema();
        c.numeric.push("extra".into());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn synth_same_seed_is_byte_identical() {
        let params = SynthParams { n_sessions: 30, n_tracks: 10, n_test_sessions: 5, seed: 7, ..SynthParams::default() };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        synth_generate(&params).unwrap().write_to_dir(dir_a.path()).unwrap();
        synth_generate(&params).unwrap().write_to_dir(dir_b.path()).unwrap();
        for name in ["catalog.csv", "sessions.jsonl", "schema.json", "sessions_test.jsonl"] {
            let a = fs::read(dir_a.path().join(name)).unwrap();
            let b = fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between runs");
        }
    }

    #[test]
    fn synth_zero_weights_give_balanced_skips() {
        let params = SynthParams {
            n_sessions: 10_000,
            n_tracks: 50,
            seed: 123,
            taste_weight: 0.0,
            position_weight: 0.0,
            momentum_weight: 0.0,
            ..SynthParams::default()
        };
        let corpus = synth_generate(&params).unwrap();
        let mut skips = 0u64;
        let mut total = 0u64;
        for s in &corpus.train {
            for t in &s.tracks {
                skips += u64::from(t.skip.unwrap());
                total += 1;
            }
        }
        let rate = skips as f64 / total as f64;
        assert!((rate - 0.5).abs() <= 0.02, "skip rate {rate}");
    }

    #[test]
    fn synth_rejects_bad_params() {
        let params = SynthParams { n_tracks: 1, ..SynthParams::default() };
        assert!(matches!(synth_generate(&params), Err(Error::Config(_))));
        let params = SynthParams { taste_weight: f64::NAN, ..SynthParams::default() };
        assert!(matches!(synth_generate(&params), Err(Error::Config(_))));
    }

    #[test]
    fn synth_sessions_validate_and_load() {
        let params = SynthParams { n_sessions: 50, n_tracks: 20, seed: 9, ..SynthParams::default() };
        let corpus = synth_generate(&params).unwrap();
        let catalog = corpus.catalog().unwrap();
        assert_eq!(catalog.len(), 20);
        for s in &corpus.train {
            s.validate().unwrap();
            for t in &s.tracks {
                catalog.index_of(&t.track_id).unwrap();
                encode_playback(&t.playback, &corpus.schema).unwrap();
            }
        }
        let batch = build_batch(&corpus.train[..8], &catalog, &corpus.schema).unwrap();
        assert_eq!(batch.size, 8);
        assert!(batch.labels.is_some());
    }
}
