//! The skip predictor: a shared track embedding feeding a session encoder
//! (LSTM + attention pooling), a 2-layer playback encoder initialized from
//! linear maps of [meta ⊕ session], and a 2-layer prediction network that
//! emits per-track skip probabilities through a ReLU/sigmoid head.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, TrackCatalog, META_WIDTH, POSITION_SLOTS};
use crate::error::{Error, Result};
use crate::nn::{
    attention_pool, dense, glorot_uniform, init_lstm_params, lstm_sequence, stacked_lstm,
    uniform_init, Activation, LstmLayer, LstmState, ParamStore,
};
use crate::tensor::{Tape, Tensor, TensorId};

pub const STACK_DEPTH: usize = 2;

/// Layer sizes. Defaults follow the full-scale configuration; `desk()` is a
/// tenth-size preset that trains in minutes on a laptop-class CPU.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub learned_dim: usize,
    pub track_embed_dim: usize,
    pub session_lstm_size: usize,
    pub stacked_lstm_size: usize,
    pub head_hidden_size: usize,
    /// Feed zeros through padded steps instead of masking (what a
    /// fixed-length kernel does). Off by default.
    #[serde(default)]
    pub paper_padding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            learned_dim: 50,
            track_embed_dim: 350,
            session_lstm_size: 100,
            stacked_lstm_size: 500,
            head_hidden_size: 500,
            paper_padding: false,
        }
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            learned_dim: 5,
            track_embed_dim: 35,
            session_lstm_size: 10,
            stacked_lstm_size: 50,
            head_hidden_size: 50,
            paper_padding: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("learned_dim", self.learned_dim),
            ("track_embed_dim", self.track_embed_dim),
            ("session_lstm_size", self.session_lstm_size),
            ("stacked_lstm_size", self.stacked_lstm_size),
            ("head_hidden_size", self.head_hidden_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// All learnable arrays, addressable by stable names. The track embedding
/// (`embed.learned`, `track.*`) is shared by the session encoder, the playback
/// encoder, and the predictor; encoder and predictor LSTMs share nothing.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
}

impl ModelParams {
    /// Initialize from a seed: `embed.learned ~ U[-0.05, 0.05]`, Glorot
    /// kernels, zero biases except LSTM forget gates at 1.0.
    pub fn init(
        config: ModelConfig,
        vocab: usize,
        feature_dim: usize,
        playback_width: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if vocab == 0 {
            return Err(Error::Config("vocabulary must have at least 1 track".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;

        store.insert("embed.learned", uniform_init(&mut rng, vec![vocab, c.learned_dim], -0.05, 0.05));
        store.insert("track.w", glorot_uniform(&mut rng, feature_dim + c.learned_dim, c.track_embed_dim));
        store.insert("track.b", Tensor::zeros(vec![c.track_embed_dim]));

        let (wx, wh, b) = init_lstm_params(&mut rng, c.track_embed_dim, c.session_lstm_size);
        store.insert("session.wx", wx);
        store.insert("session.wh", wh);
        store.insert("session.b", b);
        store.insert("attn.w", glorot_uniform(&mut rng, c.session_lstm_size, 1));
        store.insert("attn.b", Tensor::zeros(vec![1]));

        let ctx = META_WIDTH + c.session_lstm_size;
        for l in 1..=STACK_DEPTH {
            store.insert(format!("enc.init.cell{l}.w"), glorot_uniform(&mut rng, ctx, c.stacked_lstm_size));
            store.insert(format!("enc.init.cell{l}.b"), Tensor::zeros(vec![c.stacked_lstm_size]));
            store.insert(format!("enc.init.hidden{l}.w"), glorot_uniform(&mut rng, ctx, c.stacked_lstm_size));
            store.insert(format!("enc.init.hidden{l}.b"), Tensor::zeros(vec![c.stacked_lstm_size]));
        }

        let enc_in = c.track_embed_dim + playback_width;
        let pred_in = c.track_embed_dim + POSITION_SLOTS;
        for (net, first_in) in [("enc", enc_in), ("pred", pred_in)] {
            for l in 1..=STACK_DEPTH {
                let input = if l == 1 { first_in } else { c.stacked_lstm_size };
                let (wx, wh, b) = init_lstm_params(&mut rng, input, c.stacked_lstm_size);
                store.insert(format!("{net}.l{l}.wx"), wx);
                store.insert(format!("{net}.l{l}.wh"), wh);
                store.insert(format!("{net}.l{l}.b"), b);
            }
        }

        store.insert("head.fc1.w", glorot_uniform(&mut rng, c.stacked_lstm_size, c.head_hidden_size));
        store.insert("head.fc1.b", Tensor::zeros(vec![c.head_hidden_size]));
        store.insert("head.fc2.w", glorot_uniform(&mut rng, c.head_hidden_size, 1));
        store.insert("head.fc2.b", Tensor::zeros(vec![1]));

        Ok(ModelParams { config, store })
    }

    pub fn vocab(&self) -> usize {
        self.store.get("embed.learned").map_or(0, Tensor::rows)
    }

    pub fn feature_dim(&self) -> usize {
        self.store.get("track.w").map_or(0, Tensor::rows) - self.config.learned_dim
    }

    pub fn playback_width(&self) -> usize {
        self.store.get("enc.l1.wx").map_or(0, Tensor::rows) - self.config.track_embed_dim
    }

    pub fn validate_against(&self, catalog: &TrackCatalog, playback_width: usize) -> Result<()> {
        if catalog.len() != self.vocab() {
            return Err(Error::Dimension(format!(
                "catalog has {} tracks but the model was built for {}",
                catalog.len(),
                self.vocab()
            )));
        }
        if catalog.feature_dim() != self.feature_dim() {
            return Err(Error::Dimension(format!(
                "catalog has {} features but the model was built for {}",
                catalog.feature_dim(),
                self.feature_dim()
            )));
        }
        if playback_width != self.playback_width() {
            return Err(Error::Dimension(format!(
                "schema encodes {playback_width} playback values but the model was built for {}",
                self.playback_width()
            )));
        }
        Ok(())
    }
}

/// Parameters leafed onto a tape for one forward pass.
pub struct BoundModel {
    pub ids: IndexMap<String, TensorId>,
    pub masked_mode: bool,
    e_learned: TensorId,
    track_w: TensorId,
    track_b: TensorId,
    session: LstmLayer,
    attn_w: TensorId,
    attn_b: TensorId,
    init_cell: Vec<(TensorId, TensorId)>,
    init_hidden: Vec<(TensorId, TensorId)>,
    enc: Vec<LstmLayer>,
    pred: Vec<LstmLayer>,
    head1: (TensorId, TensorId),
    head2: (TensorId, TensorId),
}

impl BoundModel {
    /// Wire a bound model from already-leafed tensor ids (one per parameter
    /// name, as produced by [`ModelParams::init`]).
    pub fn from_ids(ids: IndexMap<String, TensorId>, masked_mode: bool) -> Self {
        let get = |name: &str| ids[name];
        let lstm = |net: &str, l: usize| LstmLayer {
            wx: get(&format!("{net}.l{l}.wx")),
            wh: get(&format!("{net}.l{l}.wh")),
            b: get(&format!("{net}.l{l}.b")),
        };
        BoundModel {
            masked_mode,
            e_learned: get("embed.learned"),
            track_w: get("track.w"),
            track_b: get("track.b"),
            session: LstmLayer { wx: get("session.wx"), wh: get("session.wh"), b: get("session.b") },
            attn_w: get("attn.w"),
            attn_b: get("attn.b"),
            init_cell: (1..=STACK_DEPTH)
                .map(|l| (get(&format!("enc.init.cell{l}.w")), get(&format!("enc.init.cell{l}.b"))))
                .collect(),
            init_hidden: (1..=STACK_DEPTH)
                .map(|l| {
                    (get(&format!("enc.init.hidden{l}.w")), get(&format!("enc.init.hidden{l}.b")))
                })
                .collect(),
            enc: (1..=STACK_DEPTH).map(|l| lstm("enc", l)).collect(),
            pred: (1..=STACK_DEPTH).map(|l| lstm("pred", l)).collect(),
            head1: (get("head.fc1.w"), get("head.fc1.b")),
            head2: (get("head.fc2.w"), get("head.fc2.b")),
            ids,
        }
    }
}

pub fn bind(tape: &mut Tape, params: &ModelParams) -> BoundModel {
    BoundModel::from_ids(params.store.bind(tape), !params.config.paper_padding)
}

/// ReLU(W_t [fixed ⊕ learned] + b_t) for a list of track indices.
pub fn track_embed(
    tape: &mut Tape,
    bound: &BoundModel,
    catalog: &TrackCatalog,
    ids: &[usize],
) -> Result<TensorId> {
    let fixed = tape.constant(catalog.gather(ids));
    let learned = tape.embedding_lookup(bound.e_learned, ids)?;
    let joined = tape.concat_cols(&[fixed, learned])?;
    dense(tape, joined, bound.track_w, bound.track_b, Activation::Relu)
}

/// Expanded `[b x width]` constant of one mask column, or `None` when the
/// column is all ones.
fn mask_col(tape: &mut Tape, mask: &Tensor, t: usize, width: usize) -> Option<TensorId> {
    let b = mask.rows();
    if (0..b).all(|r| mask.at(r, t) == 1.0) {
        return None;
    }
    let mut data = vec![0.0; b * width];
    for r in 0..b {
        data[r * width..(r + 1) * width].fill(mask.at(r, t));
    }
    Some(tape.constant(Tensor::new(data, vec![b, width])))
}

/// Embed one step-major id matrix, zeroing embeddings at padded slots so the
/// recurrence always sees zero vectors there.
fn embed_steps(
    tape: &mut Tape,
    bound: &BoundModel,
    catalog: &TrackCatalog,
    ids_steps: &[Vec<usize>],
    mask: &Tensor,
) -> Result<Vec<TensorId>> {
    let width = tape.shape(bound.track_b)[0];
    let mut out = Vec::with_capacity(ids_steps.len());
    for (t, ids) in ids_steps.iter().enumerate() {
        let mut embed = track_embed(tape, bound, catalog, ids)?;
        if let Some(m) = mask_col(tape, mask, t, width) {
            embed = tape.mul(embed, m)?;
        }
        out.push(embed);
    }
    Ok(out)
}

/// Session vector: LSTM over the embedded full-session track sequence from a
/// zero initial state, attention-pooled over unmasked steps.
pub fn session_encode(
    tape: &mut Tape,
    bound: &BoundModel,
    catalog: &TrackCatalog,
    ids_steps: &[Vec<usize>],
    mask: &Tensor,
) -> Result<TensorId> {
    let embeds = embed_steps(tape, bound, catalog, ids_steps, mask)?;
    let batch = mask.rows();
    let hidden = tape.shape(bound.session.wh)[0];
    let init = LstmState::zeros(tape, batch, hidden);
    let (outputs, _) = lstm_sequence(tape, &embeds, mask, bound.session, init, bound.masked_mode)?;
    attention_pool(tape, &outputs, mask, bound.attn_w, bound.attn_b)
}

/// Per-layer initial encoder states: linear maps (no activation) of
/// [meta ⊕ session].
pub fn encoder_initial_state(
    tape: &mut Tape,
    bound: &BoundModel,
    meta: TensorId,
    session: TensorId,
) -> Result<Vec<LstmState>> {
    let ctx = tape.concat_cols(&[meta, session])?;
    let mut states = Vec::with_capacity(STACK_DEPTH);
    for l in 0..STACK_DEPTH {
        let cell = dense(tape, ctx, bound.init_cell[l].0, bound.init_cell[l].1, Activation::Linear)?;
        let hidden =
            dense(tape, ctx, bound.init_hidden[l].0, bound.init_hidden[l].1, Activation::Linear)?;
        states.push(LstmState { cell, hidden });
    }
    Ok(states)
}

/// Run the stacked encoder over the first half; inputs per step are
/// [track embedding ⊕ playback features]. Returns the final state of both
/// layers.
pub fn playback_encode(
    tape: &mut Tape,
    bound: &BoundModel,
    catalog: &TrackCatalog,
    meta: TensorId,
    session: TensorId,
    enc_ids: &[Vec<usize>],
    enc_playback: &[Tensor],
    enc_mask: &Tensor,
) -> Result<Vec<LstmState>> {
    let init = encoder_initial_state(tape, bound, meta, session)?;
    let embeds = embed_steps(tape, bound, catalog, enc_ids, enc_mask)?;
    let mut inputs = Vec::with_capacity(embeds.len());
    for (embed, playback) in embeds.iter().zip(enc_playback) {
        let p = tape.constant(playback.clone());
        inputs.push(tape.concat_cols(&[*embed, p])?);
    }
    let (_, finals) = stacked_lstm(tape, &inputs, enc_mask, &bound.enc, &init, bound.masked_mode)?;
    Ok(finals)
}

/// Run the prediction stack over the second half from the encoder's final
/// state; inputs per step are [track embedding ⊕ position one-hot]. The head
/// maps each step's output through ReLU and sigmoid layers to a probability.
pub fn predict_second_half(
    tape: &mut Tape,
    bound: &BoundModel,
    catalog: &TrackCatalog,
    state_enc: &[LstmState],
    pred_ids: &[Vec<usize>],
    pred_pos: &[Tensor],
    pred_mask: &Tensor,
) -> Result<TensorId> {
    let embeds = embed_steps(tape, bound, catalog, pred_ids, pred_mask)?;
    let mut inputs = Vec::with_capacity(embeds.len());
    for (embed, pos) in embeds.iter().zip(pred_pos) {
        let p = tape.constant(pos.clone());
        inputs.push(tape.concat_cols(&[*embed, p])?);
    }
    let (outputs, _) =
        stacked_lstm(tape, &inputs, pred_mask, &bound.pred, state_enc, bound.masked_mode)?;
    let mut probs = Vec::with_capacity(outputs.len());
    for o in outputs {
        let h = dense(tape, o, bound.head1.0, bound.head1.1, Activation::Relu)?;
        probs.push(dense(tape, h, bound.head2.0, bound.head2.1, Activation::Sigmoid)?);
    }
    tape.concat_cols(&probs)
}

pub struct Forward {
    pub probs: TensorId,
    pub loss: Option<TensorId>,
    pub bound: BoundModel,
}

/// Build the whole graph for one batch from an already-bound model.
pub fn forward_graph(
    tape: &mut Tape,
    bound: &BoundModel,
    batch: &Batch,
    catalog: &TrackCatalog,
    with_loss: bool,
) -> Result<(TensorId, Option<TensorId>)> {
    let session = session_encode(tape, bound, catalog, &batch.sess_ids, &batch.sess_mask)?;
    let meta = tape.constant(batch.meta.clone());
    let state_enc = playback_encode(
        tape,
        bound,
        catalog,
        meta,
        session,
        &batch.enc_ids,
        &batch.enc_playback,
        &batch.enc_mask,
    )?;
    let probs = predict_second_half(
        tape,
        bound,
        catalog,
        &state_enc,
        &batch.pred_ids,
        &batch.pred_pos,
        &batch.pred_mask,
    )?;
    let loss = if with_loss {
        let labels = batch.labels.as_ref().ok_or_else(|| {
            Error::Contract("batch has no labels for every unmasked predictor step".into())
        })?;
        Some(tape.bce_masked(probs, labels, &batch.pred_mask)?)
    } else {
        None
    };
    Ok((probs, loss))
}

/// Full forward pass from a batch to per-track probabilities (and the masked
/// BCE loss when labels are present and requested).
pub fn forward(
    tape: &mut Tape,
    params: &ModelParams,
    batch: &Batch,
    catalog: &TrackCatalog,
    with_loss: bool,
) -> Result<Forward> {
    let playback_width = batch.enc_playback.first().map_or(0, Tensor::cols);
    params.validate_against(catalog, playback_width)?;
    let bound = bind(tape, params);
    let (probs, loss) = forward_graph(tape, &bound, batch, catalog, with_loss)?;
    Ok(Forward { probs, loss, bound })
}

/// Dense gradients for every parameter after `backward`, in store order.
pub fn collect_grads(tape: &Tape, bound: &BoundModel) -> IndexMap<String, Vec<f64>> {
    bound.ids.iter().map(|(name, &id)| (name.clone(), tape.grad_dense(id))).collect()
}

/// Probabilities for a batch as a plain `[b x pred_steps]` tensor.
pub fn predict_probs(params: &ModelParams, batch: &Batch, catalog: &TrackCatalog) -> Result<Tensor> {
    let mut tape = Tape::new();
    let fwd = forward(&mut tape, params, batch, catalog, false)?;
    Ok(tape.value(fwd.probs).clone())
}

/// Finite-difference check of the whole model on a small fixed workload:
/// 5 tracks, all layer sizes at most 8, a 2-session batch with lengths 10
/// and 14. Every parameter group is compared against central differences.
pub fn run_model_grad_check(step: f64, tol: f64, seed: u64) -> Result<crate::tensor::GradCheckReport> {
    use crate::data::{build_batch, FeatureSchema, PlaybackTrack, PlaybackValue, SessionRecord};
    use rand::Rng;
    use std::collections::BTreeMap;

    let vocab = 5;
    let ids: Vec<String> = (0..vocab).map(|i| format!("t{i}")).collect();
    let rows: Vec<Vec<f64>> = (0..vocab)
        .map(|i| vec![i as f64, (i as f64 * 1.3).sin(), 0.5 - 0.2 * i as f64])
        .collect();
    let catalog = TrackCatalog::from_rows(
        ids,
        vec!["f_0".into(), "f_1".into(), "f_2".into()],
        rows,
    )?;

    let mut categorical = IndexMap::new();
    categorical.insert("kind".to_string(), vec!["x".to_string(), "y".to_string()]);
    let schema = FeatureSchema { categorical, numeric: vec!["level".into()] };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let session = |id: &str, m: usize, rng: &mut ChaCha8Rng| SessionRecord {
        session_id: id.into(),
        premium: rng.gen_bool(0.5),
        day_of_week: rng.gen_range(0..7),
        tracks: (0..m)
            .map(|_| {
                let mut playback = BTreeMap::new();
                let kind = if rng.gen_bool(0.5) { "x" } else { "y" };
                playback.insert("kind".to_string(), PlaybackValue::Text(kind.into()));
                playback
                    .insert("level".to_string(), PlaybackValue::Number(rng.gen_range(-1.0..1.0)));
                PlaybackTrack {
                    track_id: format!("t{}", rng.gen_range(0..vocab)),
                    skip: Some(rng.gen_bool(0.5)),
                    playback,
                }
            })
            .collect(),
    };
    let sessions = vec![session("g10", 10, &mut rng), session("g14", 14, &mut rng)];
    let batch = build_batch(&sessions, &catalog, &schema)?;

    let config = ModelConfig {
        learned_dim: 3,
        track_embed_dim: 6,
        session_lstm_size: 4,
        stacked_lstm_size: 5,
        head_hidden_size: 6,
        paper_padding: false,
    };
    let params = ModelParams::init(config, vocab, 3, schema.encoding_width(), seed)?;
    let named: Vec<(String, Tensor)> =
        params.store.iter().map(|(n, t)| (n.clone(), t.clone())).collect();
    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();

    crate::tensor::grad_check(
        move |tape, ids| {
            let bound = BoundModel::from_ids(
                names.iter().cloned().zip(ids.iter().copied()).collect(),
                true,
            );
            let (_, loss) = forward_graph(tape, &bound, &batch, &catalog, true)?;
            Ok(loss.expect("loss requested"))
        },
        &named,
        step,
        tol,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_batch, FeatureSchema, PlaybackTrack, PlaybackValue, SessionRecord};
    use crate::nn::lstm_cell;
    use crate::tensor::grad_check;
    use indexmap::IndexMap as OrderedMap;
    use rand::Rng;
    use std::collections::BTreeMap;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            learned_dim: 3,
            track_embed_dim: 6,
            session_lstm_size: 4,
            stacked_lstm_size: 5,
            head_hidden_size: 6,
            paper_padding: false,
        }
    }

    fn toy_schema() -> FeatureSchema {
        let mut categorical = OrderedMap::new();
        categorical.insert("kind".to_string(), vec!["x".into(), "y".into()]);
        FeatureSchema { categorical, numeric: vec!["level".into()] }
    }

    fn toy_catalog(v: usize) -> TrackCatalog {
        let ids: Vec<String> = (0..v).map(|i| format!("t{i}")).collect();
        let rows: Vec<Vec<f64>> = (0..v)
            .map(|i| vec![i as f64, (i as f64 * 0.7).sin(), 1.0 - i as f64 * 0.3])
            .collect();
        TrackCatalog::from_rows(ids, vec!["f_0".into(), "f_1".into(), "f_2".into()], rows).unwrap()
    }

    fn toy_session(id: &str, m: usize, v: usize, seed: u64) -> SessionRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tracks = (0..m)
            .map(|_| {
                let mut playback = BTreeMap::new();
                let kind = if rng.gen_bool(0.5) { "x" } else { "y" };
                playback.insert("kind".to_string(), PlaybackValue::Text(kind.into()));
                playback.insert(
                    "level".to_string(),
                    PlaybackValue::Number(rng.gen_range(-1.0..1.0)),
                );
                PlaybackTrack {
                    track_id: format!("t{}", rng.gen_range(0..v)),
                    skip: Some(rng.gen_bool(0.5)),
                    playback,
                }
            })
            .collect();
        SessionRecord { session_id: id.into(), premium: true, day_of_week: 3, tracks }
    }

    fn toy_params(seed: u64) -> ModelParams {
        ModelParams::init(toy_config(), 5, 3, 3, seed).unwrap()
    }

    #[test]
    fn init_is_seed_deterministic_and_bounded() {
        let a = toy_params(4);
        let b = toy_params(4);
        for (name, t) in a.store.iter() {
            assert_eq!(t.data, b.store.get(name).unwrap().data, "{name}");
        }
        let embed = a.store.get("embed.learned").unwrap();
        assert!(embed.data.iter().all(|v| (-0.05..=0.05).contains(v)));
        assert!(matches!(
            ModelParams::init(ModelConfig { learned_dim: 0, ..toy_config() }, 5, 3, 3, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn encoder_and_predictor_share_only_the_embedding() {
        let params = toy_params(1);
        let enc: Vec<&String> =
            params.store.names().filter(|n| n.starts_with("enc.")).collect();
        let pred: Vec<&String> =
            params.store.names().filter(|n| n.starts_with("pred.")).collect();
        assert!(!enc.is_empty() && !pred.is_empty());
        assert!(enc.iter().all(|n| !pred.contains(n)));
        assert_eq!(params.store.names().filter(|n| *n == "embed.learned").count(), 1);
        assert_eq!(params.store.names().filter(|n| *n == "track.w").count(), 1);
    }

    #[test]
    fn track_embed_is_relu_of_composed_lookup() {
        let params = toy_params(2);
        let catalog = toy_catalog(5);
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params);
        let ids = [3usize, 0, 3];
        let out = track_embed(&mut tape, &bound, &catalog, &ids).unwrap();
        assert!(tape.value(out).data.iter().all(|&v| v >= 0.0));

        // Hand-compose the same thing from primitives.
        let fixed = tape.constant(catalog.gather(&ids));
        let learned = tape.embedding_lookup(bound.ids["embed.learned"], &ids).unwrap();
        let cat = tape.concat_cols(&[fixed, learned]).unwrap();
        let z = tape.matmul(cat, bound.ids["track.w"]).unwrap();
        let z = tape.add_bias_row(z, bound.ids["track.b"]).unwrap();
        let expect = tape.relu(z);
        assert_eq!(tape.value(out).data, tape.value(expect).data);
    }

    #[test]
    fn zero_projection_gives_zero_embeddings() {
        let mut params = toy_params(3);
        params.store.get_mut("track.w").unwrap().data.fill(0.0);
        let catalog = toy_catalog(5);
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params);
        let out = track_embed(&mut tape, &bound, &catalog, &[0, 4]).unwrap();
        assert!(tape.value(out).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn session_encode_single_step_equals_lstm_output() {
        let params = toy_params(5);
        let catalog = toy_catalog(5);
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params);
        let ids = vec![vec![2usize, 4]];
        let mask = Tensor::filled(1.0, vec![2, 1]);
        let vec_out = session_encode(&mut tape, &bound, &catalog, &ids, &mask).unwrap();

        let embed = track_embed(&mut tape, &bound, &catalog, &ids[0]).unwrap();
        let init = LstmState::zeros(&mut tape, 2, 4);
        let cell = lstm_cell(&mut tape, embed, bound.session, init).unwrap();
        assert_eq!(tape.value(vec_out).data, tape.value(cell.hidden).data);
    }

    #[test]
    fn session_encode_is_padding_invariant_in_masked_mode() {
        let params = toy_params(6);
        let catalog = toy_catalog(5);
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params);

        let tight_ids = vec![vec![1usize], vec![2], vec![3]];
        let tight_mask = Tensor::filled(1.0, vec![1, 3]);
        let tight = session_encode(&mut tape, &bound, &catalog, &tight_ids, &tight_mask).unwrap();

        let padded_ids = vec![vec![1usize], vec![2], vec![3], vec![0], vec![0]];
        let padded_mask = Tensor::new(vec![1.0, 1.0, 1.0, 0.0, 0.0], vec![1, 5]);
        let padded = session_encode(&mut tape, &bound, &catalog, &padded_ids, &padded_mask).unwrap();

        assert_eq!(tape.value(tight).data, tape.value(padded).data);
    }

    #[test]
    fn session_encode_repeated_track_stays_in_output_hull() {
        let params = toy_params(7);
        let catalog = toy_catalog(5);
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params);
        let ids = vec![vec![2usize], vec![2], vec![2], vec![2]];
        let mask = Tensor::filled(1.0, vec![1, 4]);
        let pooled = session_encode(&mut tape, &bound, &catalog, &ids, &mask).unwrap();

        let embeds = embed_steps(&mut tape, &bound, &catalog, &ids, &mask).unwrap();
        let init = LstmState::zeros(&mut tape, 1, 4);
        let (outputs, _) =
            lstm_sequence(&mut tape, &embeds, &mask, bound.session, init, true).unwrap();
        for j in 0..4 {
            let coords: Vec<f64> = outputs.iter().map(|o| tape.value(*o).data[j]).collect();
            let lo = coords.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = coords.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let v = tape.value(pooled).data[j];
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "{v} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn zeroed_init_maps_and_masked_encoder_give_zero_state() {
        let mut params = toy_params(8);
        for l in 1..=STACK_DEPTH {
            params.store.get_mut(&format!("enc.init.cell{l}.w")).unwrap().data.fill(0.0);
            params.store.get_mut(&format!("enc.init.hidden{l}.w")).unwrap().data.fill(0.0);
        }
        let catalog = toy_catalog(5);
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params);
        let meta = tape.constant(Tensor::filled(1.0, vec![1, META_WIDTH]));
        let session = tape.constant(Tensor::filled(0.5, vec![1, 4]));
        let enc_ids = vec![vec![0usize], vec![1]];
        let playback = vec![Tensor::zeros(vec![1, 3]), Tensor::zeros(vec![1, 3])];
        let mask = Tensor::zeros(vec![1, 2]);
        let finals = playback_encode(
            &mut tape, &bound, &catalog, meta, session, &enc_ids, &playback, &mask,
        )
        .unwrap();
        for state in finals {
            assert!(tape.value(state.cell).data.iter().all(|&v| v == 0.0));
            assert!(tape.value(state.hidden).data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn initial_state_is_linear_in_context() {
        let params = toy_params(9);
        let mut tape = Tape::new();
        let base_meta = Tensor::new((0..META_WIDTH).map(|i| i as f64 * 0.1).collect(), vec![1, META_WIDTH]);
        let base_sess = Tensor::new(vec![0.3, -0.2, 0.8, 0.05], vec![1, 4]);
        let mut bias_free = params.clone();
        for l in 1..=STACK_DEPTH {
            bias_free.store.get_mut(&format!("enc.init.cell{l}.b")).unwrap().data.fill(0.0);
            bias_free.store.get_mut(&format!("enc.init.hidden{l}.b")).unwrap().data.fill(0.0);
        }
        let bound = bind(&mut tape, &bias_free);
        let m1 = tape.constant(base_meta.clone());
        let s1 = tape.constant(base_sess.clone());
        let once = encoder_initial_state(&mut tape, &bound, m1, s1).unwrap();
        let m2 = tape.constant(Tensor::new(base_meta.data.iter().map(|v| v * 2.0).collect(), vec![1, META_WIDTH]));
        let s2 = tape.constant(Tensor::new(base_sess.data.iter().map(|v| v * 2.0).collect(), vec![1, 4]));
        let twice = encoder_initial_state(&mut tape, &bound, m2, s2).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            for (x, y) in tape.value(a.cell).data.iter().zip(&tape.value(b.cell).data) {
                assert!((2.0 * x - y).abs() < 1e-12);
            }
            for (x, y) in tape.value(a.hidden).data.iter().zip(&tape.value(b.hidden).data) {
                assert!((2.0 * x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn probabilities_are_in_open_unit_interval() {
        let params = toy_params(10);
        let catalog = toy_catalog(5);
        let schema = toy_schema();
        let sessions = vec![toy_session("a", 12, 5, 1), toy_session("b", 17, 5, 2)];
        let batch = build_batch(&sessions, &catalog, &schema).unwrap();
        let probs = predict_probs(&params, &batch, &catalog).unwrap();
        assert!(probs.data.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn zeroed_head_gives_exactly_half() {
        let mut params = toy_params(11);
        params.store.get_mut("head.fc2.w").unwrap().data.fill(0.0);
        params.store.get_mut("head.fc2.b").unwrap().data.fill(0.0);
        let catalog = toy_catalog(5);
        let schema = toy_schema();
        let batch = build_batch(&[toy_session("a", 10, 5, 3)], &catalog, &schema).unwrap();
        let probs = predict_probs(&params, &batch, &catalog).unwrap();
        assert!(probs.data.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn loss_is_invariant_to_session_order() {
        let params = toy_params(12);
        let catalog = toy_catalog(5);
        let schema = toy_schema();
        let a = toy_session("a", 11, 5, 4);
        let b = toy_session("b", 15, 5, 5);
        let run = |sessions: &[SessionRecord]| {
            let batch = build_batch(sessions, &catalog, &schema).unwrap();
            let mut tape = Tape::new();
            let fwd = forward(&mut tape, &params, &batch, &catalog, true).unwrap();
            tape.value(fwd.loss.unwrap()).data[0]
        };
        let fwd = run(&[a.clone(), b.clone()]);
        let rev = run(&[b, a]);
        assert!((fwd - rev).abs() < 1e-12, "{fwd} vs {rev}");
    }

    #[test]
    fn per_session_probs_do_not_depend_on_batch_mates() {
        let params = toy_params(13);
        let catalog = toy_catalog(5);
        let schema = toy_schema();
        let a = toy_session("a", 13, 5, 6);
        let b = toy_session("b", 19, 5, 7);
        let alone = predict_probs(&params, &build_batch(std::slice::from_ref(&a), &catalog, &schema).unwrap(), &catalog).unwrap();
        let together =
            predict_probs(&params, &build_batch(&[b, a], &catalog, &schema).unwrap(), &catalog).unwrap();
        for t in 0..10 {
            assert!((alone.at(0, t) - together.at(1, t)).abs() <= 1e-12);
        }
    }

    #[test]
    fn full_model_passes_grad_check_on_toy_batch() {
        let params = toy_params(14);
        let catalog = toy_catalog(5);
        let schema = toy_schema();
        let sessions = vec![toy_session("a", 10, 5, 8), toy_session("b", 14, 5, 9)];
        let batch = build_batch(&sessions, &catalog, &schema).unwrap();

        let named: Vec<(String, Tensor)> =
            params.store.iter().map(|(n, t)| (n.clone(), t.clone())).collect();
        let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
        let report = grad_check(
            move |tape, ids| {
                let bound = BoundModel::from_ids(
                    names.iter().cloned().zip(ids.iter().copied()).collect(),
                    true,
                );
                let (_, loss) = forward_graph(tape, &bound, &batch, &catalog, true)?;
                Ok(loss.unwrap())
            },
            &named,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "failures: {:?}", report.failures());
    }
}
