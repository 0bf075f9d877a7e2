//! Combined-objective training: warm-up MLM pretraining (the stand-in for a
//! pretrained encoder at this scale), the contrastive + conditional-MLM
//! step, Adam updates with per-group freezing, and deterministic loops.
//!
//! Every stochastic concern draws from its own `(seed, name, step)` stream:
//! batch sampling, masking, dropout pass 1, dropout pass 2, fusioner
//! dropout, augmentation. Disabling one branch therefore never shifts the
//! draws of another, which makes the lambda = 0 run and the
//! contrastive-only run identical step for step, and makes resume from a
//! checkpoint exact with only (seed, step) persisted.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auxnet::{conditional_mlm_loss, fuse_and_predict, lexical_features, masked_to_batch};
use crate::contrastive::{augmented_forward, info_nce_loss, simcse_forward, ContrastiveConfig};
use crate::encoder::{
    encode_batch, init_blocks, init_mlm_head, init_params, linear, pool_cls, split_extractor,
    BlockParams, DropoutDraw, EncoderConfig, EncoderParams, MlmHead,
};
use crate::rng::stream_rng;
use crate::tensor::{Graph, ParamStore, Tensor, TensorError};
use crate::text::{mask_tokens, sample_indices, DataConfig, MaskedSeq, TextError, TokenSeq};

pub mod streams {
    pub const INIT_MAIN: &str = "init-main";
    pub const INIT_HEAD: &str = "init-head";
    pub const INIT_FUSIONER: &str = "init-fusioner";
    pub const WARMUP_SHUFFLE: &str = "warmup-shuffle";
    pub const WARMUP_MASK: &str = "warmup-mask";
    pub const WARMUP_DROP: &str = "warmup-drop";
    pub const SHUFFLE: &str = "shuffle";
    pub const MASK: &str = "mask";
    pub const DROP1: &str = "drop1";
    pub const DROP2: &str = "drop2";
    pub const DROP_FUSIONER: &str = "drop-fusioner";
    pub const AUGMENT: &str = "augment";
    pub const HELDOUT: &str = "heldout";
    pub const HELDOUT_MASK: &str = "heldout-mask";
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    /// Weight of the conditional MLM term in the combined loss.
    pub lambda: f32,
    pub learning_rate: f32,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub warmup_steps: u64,
    /// Ablation switch; the extractor is frozen in the normal configuration.
    pub freeze_extractor: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.005,
            learning_rate: 1e-3,
            steps: 500,
            batch_size: 32,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            warmup_steps: 500,
            freeze_extractor: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub extractor_layers: usize,
    pub fusioner_layers: usize,
    pub data: DataConfig,
    pub contrastive: ContrastiveConfig,
    pub train: TrainConfig,
    /// Hash binding a checkpoint to its config + vocab; assigned by the CLI.
    #[serde(default)]
    pub config_hash: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            extractor_layers: 3,
            fusioner_layers: 2,
            data: DataConfig::default(),
            contrastive: ContrastiveConfig::default(),
            train: TrainConfig::default(),
            config_hash: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.contrastive.validate()?;
        self.data.validate()?;
        if self.encoder.max_seq_len != self.data.seq_len {
            return Err(TrainError::InvalidConfig(format!(
                "encoder max_seq_len {} != data seq_len {}",
                self.encoder.max_seq_len, self.data.seq_len
            )));
        }
        if self.extractor_layers == 0 || self.extractor_layers > self.encoder.n_layers {
            return Err(TrainError::InvalidConfig(format!(
                "extractor_layers {} out of range 1..={}",
                self.extractor_layers, self.encoder.n_layers
            )));
        }
        if self.fusioner_layers == 0 {
            return Err(TrainError::InvalidConfig("fusioner_layers must be >= 1".into()));
        }
        if self.train.lambda < 0.0 {
            return Err(TrainError::InvalidConfig(format!("lambda {} < 0", self.train.lambda)));
        }
        if self.train.batch_size < 2 {
            return Err(TrainError::InvalidConfig(format!(
                "batch_size {} < 2 (contrastive training needs in-batch negatives)",
                self.train.batch_size
            )));
        }
        if !(self.train.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-step scalars of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_contrast: f32,
    pub l_mlm: f32,
    pub l_total: f32,
}

impl LossBreakdown {
    /// l_total must equal l_contrast + lambda * l_mlm to 1e-6.
    pub fn identity_gap(&self, lambda: f32) -> f64 {
        (self.l_total as f64 - (self.l_contrast as f64 + lambda as f64 * self.l_mlm as f64)).abs()
    }
}

/// Exact weighted sum of the two loss terms.
pub fn combined_loss(l_contrast: f32, l_mlm: f32, lambda: f32) -> f32 {
    l_contrast + lambda * l_mlm
}

/// Which terms participate; the loss-removal ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Full,
    /// Contrastive-only: the auxiliary branch never runs.
    NoMlm,
    /// Conditional-MLM only: no second pass, no InfoNCE.
    NoContrastive,
}

/// How the second view of each sentence is built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    /// Second independent dropout pass over the identical tokens.
    DropoutOnly,
    /// Repeat a fraction of the words, then encode under dropout.
    WordRepetition { fraction: f32 },
    /// Delete one word, then encode under dropout.
    DropOneWord,
}

impl Default for AugmentMode {
    fn default() -> Self {
        Self::DropoutOnly
    }
}

/// Adam moments aligned index-for-index with a `ParamStore`.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.ids().map(|id| vec![0.0; store.value(id).len()]).collect::<Vec<_>>();
        let v = m.clone();
        Self { m, v, t: 0 }
    }

    /// One bias-corrected update over every non-frozen parameter, in id
    /// order. Gradients are read from the store's buffers.
    pub fn step(&mut self, store: &mut ParamStore, cfg: &TrainConfig) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            if store.is_frozen(id) {
                continue;
            }
            let grad = store.grad(id).to_vec();
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            for ((g, m), v) in grad.iter().zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            }
            let value = store.value_mut(id).data_mut();
            for ((x, &m), &v) in value.iter_mut().zip(self.m[id.index()].iter()).zip(self.v[id.index()].iter()) {
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                *x -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
    }
}

/// Result of warm-up MLM pretraining: the base encoder and its prediction
/// head, before any splitting.
pub struct PretrainedModel {
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub head: MlmHead,
    pub cfg: ModelConfig,
    pub steps_done: u64,
}

/// Full training state: main encoder, frozen extractor, fusioner, head,
/// optimizer moments, and the step counter that keys every random stream.
pub struct ModelState {
    pub store: ParamStore,
    pub main: EncoderParams,
    pub extractor: EncoderParams,
    pub fusioner: Vec<BlockParams>,
    pub head: MlmHead,
    pub adam: AdamState,
    pub step: u64,
    pub cfg: ModelConfig,
}

fn check_finite(value: f32, step: u64, what: &str) -> Result<f32> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(TrainError::Diverged { step, detail: format!("{what} is {value}") })
    }
}

fn sample_batch(corpus: &[TokenSeq], seed: u64, stream: &str, step: u64, n: usize) -> Vec<TokenSeq> {
    let mut rng = stream_rng(seed, stream, step);
    sample_indices(&mut rng, corpus.len(), n).into_iter().map(|i| corpus[i].clone()).collect()
}

fn mask_batch(batch: &[TokenSeq], mask_rate: f32, seed: u64, stream: &str, step: u64) -> Result<Vec<MaskedSeq>> {
    let mut rng = stream_rng(seed, stream, step);
    batch.iter().map(|s| mask_tokens(s, mask_rate, &mut rng).map_err(TrainError::from)).collect()
}

/// Plain (unconditional) MLM training of a fresh encoder: mask, encode with
/// dropout, predict at the masked positions, cross-entropy, Adam. The
/// result seeds the main encoder and, via the split, the frozen extractor.
pub fn warmup_pretrain(cfg: &ModelConfig, corpus: &[TokenSeq]) -> Result<(PretrainedModel, Vec<f32>)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::Text(TextError::EmptyCorpus));
    }
    let seed = cfg.train.seed;
    let mut store = ParamStore::new();
    let mut rng = stream_rng(seed, streams::INIT_MAIN, 0);
    let encoder = init_params(&mut store, &cfg.encoder, "main", &mut rng)?;
    let mut rng = stream_rng(seed, streams::INIT_HEAD, 0);
    let head = init_mlm_head(&mut store, &cfg.encoder, "head", &mut rng);
    let mut adam = AdamState::new(&store);

    let mut losses = Vec::with_capacity(cfg.train.warmup_steps as usize);
    for step in 0..cfg.train.warmup_steps {
        let batch = sample_batch(corpus, seed, streams::WARMUP_SHUFFLE, step, cfg.train.batch_size);
        let masked = mask_batch(&batch, cfg.data.mask_rate, seed, streams::WARMUP_MASK, step)?;
        let loss = warmup_step(&mut store, &encoder, &head, cfg, &masked, step)?;
        let loss = check_finite(loss, step, "warm-up MLM loss")?;
        adam.step(&mut store, &cfg.train);
        store.zero_grads();
        losses.push(loss);
    }
    Ok((
        PretrainedModel { store, encoder, head, cfg: cfg.clone(), steps_done: cfg.train.warmup_steps },
        losses,
    ))
}

fn warmup_step(
    store: &mut ParamStore,
    encoder: &EncoderParams,
    head: &MlmHead,
    cfg: &ModelConfig,
    masked: &[MaskedSeq],
    step: u64,
) -> Result<f32> {
    let mut g = Graph::new();
    let mut draw = DropoutDraw::train(stream_rng(cfg.train.seed, streams::WARMUP_DROP, step));
    let batch = masked_to_batch(masked);
    let hidden = encode_batch(&mut g, store, encoder, &cfg.encoder, &batch, &mut draw)?;
    let (rows, targets) = crate::auxnet::masked_rows_and_targets(masked, cfg.encoder.max_seq_len)?;
    let picked = g.gather_rows(hidden, rows)?;
    let w = g.param(store, head.w);
    let b = g.param(store, head.b);
    let logits = linear(&mut g, picked, w, b)?;
    let loss = g.cross_entropy_rows(logits, targets)?;
    g.backward(loss, store)?;
    Ok(g.scalar_value(loss))
}

/// Assemble the full model: the warm-up encoder continues as the trainable
/// main encoder, its first `extractor_layers` blocks are copied and frozen
/// as the lexical feature extractor, the fusioner starts fresh, and the
/// warm-up MLM head carries over. Optimizer moments start at zero.
pub fn build_model_state(pre: PretrainedModel) -> Result<ModelState> {
    let PretrainedModel { mut store, encoder, head, cfg, .. } = pre;
    let extractor = split_extractor(
        &mut store,
        &encoder,
        cfg.encoder.n_layers,
        cfg.extractor_layers,
        "ext",
    )?;
    if !cfg.train.freeze_extractor {
        // ablation switch: let gradients reach the extractor copy
        for id in extractor.ids() {
            store.set_frozen(id, false);
        }
    }
    let mut rng = stream_rng(cfg.train.seed, streams::INIT_FUSIONER, 0);
    let fusioner = init_blocks(&mut store, &cfg.encoder, cfg.fusioner_layers, "fus", &mut rng);
    let adam = AdamState::new(&store);
    Ok(ModelState { store, main: encoder, extractor, fusioner, head, adam, step: 0, cfg })
}

/// One combined step over an already-sampled clean batch:
/// (a) two dropout passes and the InfoNCE loss, (b) masking, frozen lexical
/// features, fusion with the first-pass embedding, conditional MLM loss,
/// (c) the weighted sum, (d) one Adam update of every non-frozen parameter.
pub fn train_step(
    state: &mut ModelState,
    batch: &[TokenSeq],
    mode: LossMode,
    augment: AugmentMode,
) -> Result<LossBreakdown> {
    let step = state.step;
    let cfg = &state.cfg;
    let seed = cfg.train.seed;
    let enc_cfg = &cfg.encoder;
    let p = enc_cfg.max_seq_len;
    let mut g = Graph::new();

    // (a) first pass always runs: h feeds both branches
    let (h, l_contrast_node) = match mode {
        LossMode::NoContrastive => {
            let mut d1 = DropoutDraw::train(stream_rng(seed, streams::DROP1, step));
            let hidden1 = encode_batch(&mut g, &state.store, &state.main, enc_cfg, batch, &mut d1)?;
            (pool_cls(&mut g, hidden1, p)?, None)
        }
        _ => {
            let mut d1 = DropoutDraw::train(stream_rng(seed, streams::DROP1, step));
            let mut d2 = DropoutDraw::train(stream_rng(seed, streams::DROP2, step));
            let pairs = match augment {
                AugmentMode::DropoutOnly => {
                    simcse_forward(&mut g, &state.store, &state.main, enc_cfg, batch, &mut d1, &mut d2)?
                }
                _ => {
                    let view2 = augment_batch(batch, augment, seed, step)?;
                    augmented_forward(
                        &mut g, &state.store, &state.main, enc_cfg, batch, &view2, &mut d1, &mut d2,
                    )?
                }
            };
            let loss = info_nce_loss(&mut g, &pairs, cfg.contrastive.temperature)?;
            (pairs.h, Some(loss))
        }
    };

    // (b) auxiliary branch on the same sentences
    let l_mlm_node = if mode == LossMode::NoMlm {
        None
    } else {
        let masked = mask_batch(batch, cfg.data.mask_rate, seed, streams::MASK, step)?;
        let ext_cfg = enc_cfg.with_layers(cfg.extractor_layers);
        let mut fus_draw = DropoutDraw::train(stream_rng(seed, streams::DROP_FUSIONER, step));
        let logits = if cfg.train.freeze_extractor {
            let feats = lexical_features(&state.store, &state.extractor, &ext_cfg, &masked, &DropoutDraw::eval())?;
            fuse_and_predict(
                &mut g, &state.store, &state.fusioner, &state.head, enc_cfg, h, &feats, &masked,
                &mut fus_draw,
            )?
        } else {
            // unfrozen ablation: the extractor joins the graph so gradient
            // can actually reach it (still no dropout inside it)
            let ext_batch = masked_to_batch(&masked);
            let mut ext_draw = DropoutDraw::eval();
            let h_prime =
                encode_batch(&mut g, &state.store, &state.extractor, &ext_cfg, &ext_batch, &mut ext_draw)?;
            let (_, valid) = crate::encoder::batch_layout(&ext_batch, p)?;
            let fused = g.splice_row0(h_prime, h, p)?;
            let out = crate::encoder::run_blocks(
                &mut g, &state.store, &state.fusioner, enc_cfg, fused, &valid, &mut fus_draw,
            )?;
            let w = g.param(&state.store, state.head.w);
            let b = g.param(&state.store, state.head.b);
            linear(&mut g, out, w, b)?
        };
        Some(conditional_mlm_loss(&mut g, logits, &masked, p)?)
    };

    // (c) combine on-graph so one backward covers everything
    let lambda = cfg.train.lambda;
    let (total_node, l_contrast, l_mlm) = match (l_contrast_node, l_mlm_node) {
        (Some(lc), Some(lm)) => {
            let total = g.add_scaled(lc, lm, lambda)?;
            (total, g.scalar_value(lc), g.scalar_value(lm))
        }
        (Some(lc), None) => (lc, g.scalar_value(lc), 0.0),
        (None, Some(lm)) => {
            let total = g.scale(lm, lambda)?;
            (total, 0.0, g.scalar_value(lm))
        }
        (None, None) => {
            return Err(TrainError::InvalidConfig("both loss terms disabled".into()));
        }
    };
    let l_total = check_finite(g.scalar_value(total_node), step, "combined loss")?;

    // (d) update
    g.backward(total_node, &mut state.store)?;
    state.adam.step(&mut state.store, &cfg.train);
    state.store.zero_grads();
    state.step += 1;

    Ok(LossBreakdown { l_contrast, l_mlm, l_total })
}

fn augment_batch(batch: &[TokenSeq], augment: AugmentMode, seed: u64, step: u64) -> Result<Vec<TokenSeq>> {
    let mut rng = stream_rng(seed, streams::AUGMENT, step);
    batch
        .iter()
        .map(|s| match augment {
            AugmentMode::DropoutOnly => Ok(s.clone()),
            AugmentMode::WordRepetition { fraction } => {
                crate::text::augment_word_repetition(s, fraction, &mut rng).map_err(TrainError::from)
            }
            // sentences too short to drop from keep their original view
            AugmentMode::DropOneWord => match crate::text::augment_drop_one_word(s, &mut rng) {
                Ok(v) => Ok(v),
                Err(TextError::Undroppable(_)) => Ok(s.clone()),
                Err(e) => Err(e.into()),
            },
        })
        .collect()
}

/// Drive `steps` training steps, sampling each batch from the shuffle
/// stream, reporting one breakdown per step.
pub fn run_training(
    state: &mut ModelState,
    corpus: &[TokenSeq],
    steps: u64,
    mode: LossMode,
    augment: AugmentMode,
    mut per_step: impl FnMut(u64, &LossBreakdown),
) -> Result<Vec<LossBreakdown>> {
    if corpus.is_empty() {
        return Err(TrainError::Text(TextError::EmptyCorpus));
    }
    let mut out = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let batch = sample_batch(
            corpus,
            state.cfg.train.seed,
            streams::SHUFFLE,
            state.step,
            state.cfg.train.batch_size,
        );
        let breakdown = train_step(state, &batch, mode, augment)?;
        per_step(state.step - 1, &breakdown);
        out.push(breakdown);
    }
    Ok(out)
}

/// Held-out probe of the conditional channel: average increase of the
/// conditional MLM loss when the spliced-in sentence embedding is replaced
/// by the zero vector. Positive gap = the embedding carries information the
/// fusioner actually uses.
pub fn conditional_information_gap(
    state: &ModelState,
    corpus: &[TokenSeq],
    n_batches: u64,
) -> Result<f64> {
    let cfg = &state.cfg;
    let enc_cfg = &cfg.encoder;
    let ext_cfg = enc_cfg.with_layers(cfg.extractor_layers);
    let p = enc_cfg.max_seq_len;
    let mut total_gap = 0.0f64;
    for b in 0..n_batches {
        let batch = sample_batch(corpus, cfg.train.seed, streams::HELDOUT, b, cfg.train.batch_size);
        let masked = mask_batch(&batch, cfg.data.mask_rate, cfg.train.seed, streams::HELDOUT_MASK, b)?;
        let feats = lexical_features(&state.store, &state.extractor, &ext_cfg, &masked, &DropoutDraw::eval())?;

        let loss_with = |h_tensor: Tensor| -> Result<f64> {
            let mut g = Graph::new();
            let h = g.constant(h_tensor);
            let mut draw = DropoutDraw::eval();
            let logits = fuse_and_predict(
                &mut g, &state.store, &state.fusioner, &state.head, enc_cfg, h, &feats, &masked,
                &mut draw,
            )?;
            let loss = conditional_mlm_loss(&mut g, logits, &masked, p)?;
            Ok(g.scalar_value(loss) as f64)
        };

        let h = crate::encoder::embed_sentences(&state.store, &state.main, enc_cfg, &batch)?;
        let zero = Tensor::zeros(vec![batch.len(), enc_cfg.d_model]);
        let with_h = loss_with(h)?;
        let with_zero = loss_with(zero)?;
        total_gap += with_zero - with_h;
    }
    Ok(total_gap / n_batches as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{encode_corpus, Vocab};

    fn setup(seed: u64) -> (ModelConfig, Vec<TokenSeq>) {
        let corpus = crate::eval::synthetic_corpus(120, 11);
        let vocab = Vocab::build(&corpus, 512).unwrap();
        let mut cfg = ModelConfig {
            encoder: EncoderConfig {
                d_model: 16,
                n_heads: 2,
                n_layers: 2,
                d_ff: 32,
                dropout_p: 0.1,
                max_seq_len: 12,
                vocab_size: vocab.len(),
            },
            extractor_layers: 1,
            fusioner_layers: 1,
            ..ModelConfig::default()
        };
        cfg.data.seq_len = 12;
        cfg.train.seed = seed;
        cfg.train.batch_size = 8;
        cfg.train.warmup_steps = 20;
        cfg.train.steps = 20;
        let seqs = encode_corpus(&corpus, &vocab, cfg.data.seq_len);
        (cfg, seqs)
    }

    #[test]
    fn combined_loss_trivial_values() {
        assert_eq!(combined_loss(0.7, 123.0, 0.0), 0.7);
        assert!((combined_loss(1.0, 8.0, 0.005) - 1.04).abs() < 1e-7);
        assert_eq!(combined_loss(0.31, 0.0, 1.0), 0.31);
    }

    #[test]
    fn warmup_zero_steps_returns_the_raw_init() {
        let (mut cfg, seqs) = setup(5);
        cfg.train.warmup_steps = 0;
        let (pre, losses) = warmup_pretrain(&cfg, &seqs).unwrap();
        assert!(losses.is_empty());

        // identical to a fresh init from the same streams
        let mut store2 = ParamStore::new();
        let mut rng = stream_rng(5, streams::INIT_MAIN, 0);
        let enc2 = init_params(&mut store2, &cfg.encoder, "main", &mut rng).unwrap();
        for (a, b) in pre.encoder.ids().iter().zip(enc2.ids()) {
            assert_eq!(pre.store.value(*a).data(), store2.value(b).data());
        }
    }

    #[test]
    fn warmup_reduces_the_mlm_loss() {
        let (mut cfg, seqs) = setup(7);
        cfg.train.warmup_steps = 120;
        let (_pre, losses) = warmup_pretrain(&cfg, &seqs).unwrap();
        let head: f32 = losses[..10].iter().sum::<f32>() / 10.0;
        let tail: f32 = losses[losses.len() - 10..].iter().sum::<f32>() / 10.0;
        assert!(tail < head, "no learning: first window {head}, last window {tail}");
    }

    #[test]
    fn warmup_is_bit_reproducible() {
        let (cfg, seqs) = setup(9);
        let run = || {
            let (pre, losses) = warmup_pretrain(&cfg, &seqs).unwrap();
            let flat: Vec<u32> = pre
                .encoder
                .ids()
                .iter()
                .chain(pre.head.ids().iter())
                .flat_map(|&id| pre.store.value(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect();
            (flat, losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn train_step_leaves_frozen_extractor_untouched_and_keeps_identity() {
        let (cfg, seqs) = setup(13);
        let (pre, _) = warmup_pretrain(&cfg, &seqs).unwrap();
        let mut state = build_model_state(pre).unwrap();
        let before: Vec<Vec<u32>> = state
            .extractor
            .ids()
            .iter()
            .map(|&id| state.store.value(id).data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let breakdowns =
            run_training(&mut state, &seqs, 10, LossMode::Full, AugmentMode::DropoutOnly, |_, _| {}).unwrap();
        for bd in &breakdowns {
            assert!(bd.identity_gap(cfg.train.lambda) < 1e-6, "{bd:?}");
            assert!(bd.l_contrast.is_finite() && bd.l_mlm.is_finite());
        }
        let after: Vec<Vec<u32>> = state
            .extractor
            .ids()
            .iter()
            .map(|&id| state.store.value(id).data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after, "frozen extractor drifted");
    }

    #[test]
    fn lambda_zero_equals_contrastive_only_bitwise() {
        let (mut cfg, seqs) = setup(17);
        cfg.train.warmup_steps = 10;
        let trajectory = |mode: LossMode, lambda: f32| {
            let mut cfg = cfg.clone();
            cfg.train.lambda = lambda;
            let (pre, _) = warmup_pretrain(&cfg, &seqs).unwrap();
            let mut state = build_model_state(pre).unwrap();
            run_training(&mut state, &seqs, 12, mode, AugmentMode::DropoutOnly, |_, _| {}).unwrap();
            let flat: Vec<u32> = state
                .main
                .ids()
                .iter()
                .flat_map(|&id| state.store.value(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect();
            flat
        };
        let lambda_zero = trajectory(LossMode::Full, 0.0);
        let contrastive_only = trajectory(LossMode::NoMlm, 0.0);
        assert_eq!(lambda_zero, contrastive_only);
    }

    #[test]
    fn unfreezing_the_extractor_makes_it_move() {
        let (mut cfg, seqs) = setup(19);
        cfg.train.warmup_steps = 5;
        cfg.train.freeze_extractor = false;
        let (pre, _) = warmup_pretrain(&cfg, &seqs).unwrap();
        let mut state = build_model_state(pre).unwrap();
        let before: Vec<Vec<u32>> = state
            .extractor
            .ids()
            .iter()
            .map(|&id| state.store.value(id).data().iter().map(|v| v.to_bits()).collect())
            .collect();
        run_training(&mut state, &seqs, 5, LossMode::Full, AugmentMode::DropoutOnly, |_, _| {}).unwrap();
        let after: Vec<Vec<u32>> = state
            .extractor
            .ids()
            .iter()
            .map(|&id| state.store.value(id).data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_ne!(before, after, "freezing switch is vacuous");
    }

    #[test]
    fn augmented_views_train_without_error() {
        let (mut cfg, seqs) = setup(23);
        cfg.train.warmup_steps = 5;
        let (pre, _) = warmup_pretrain(&cfg, &seqs).unwrap();
        let mut state = build_model_state(pre).unwrap();
        for augment in [AugmentMode::WordRepetition { fraction: 0.32 }, AugmentMode::DropOneWord] {
            let bd = run_training(&mut state, &seqs, 2, LossMode::Full, augment, |_, _| {}).unwrap();
            assert!(bd.iter().all(|b| b.l_total.is_finite()));
        }
    }

    #[test]
    fn trained_conditional_gap_is_measurable() {
        let (mut cfg, seqs) = setup(29);
        cfg.train.warmup_steps = 60;
        cfg.train.steps = 60;
        let (pre, _) = warmup_pretrain(&cfg, &seqs).unwrap();
        let mut state = build_model_state(pre).unwrap();
        run_training(&mut state, &seqs, 60, LossMode::Full, AugmentMode::DropoutOnly, |_, _| {}).unwrap();
        let gap = conditional_information_gap(&state, &seqs, 5).unwrap();
        assert!(gap.is_finite());
    }
}
