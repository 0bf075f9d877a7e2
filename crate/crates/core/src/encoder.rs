//! Small post-layer-norm transformer encoder.
//!
//! Dropout lives at exactly three sites: on the summed embeddings, on the
//! attention-probability matrix inside each block, and on the FFN output of
//! each block. Two passes over the same batch with distinct dropout streams
//! therefore give two different encodings of every sentence, which is what
//! the contrastive loss feeds on. PAD positions carry zero attention weight
//! as keys. The sentence embedding is the raw position-0 ([CLS]) hidden
//! state — no projection head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Result, Tensor, TensorError};
use crate::text::TokenSeq;

pub const LN_EPS: f32 = 1e-9;
pub const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub dropout_p: f32,
    /// Fixed sequence length p.
    pub max_seq_len: usize,
    pub vocab_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            d_ff: 256,
            dropout_p: 0.1,
            max_seq_len: 32,
            vocab_size: 4096,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(TensorError::State(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(TensorError::State(format!("dropout_p {} not in [0, 1)", self.dropout_p)));
        }
        if self.n_layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return Err(TensorError::State("zero-sized encoder dimension".into()));
        }
        if self.vocab_size < 5 {
            return Err(TensorError::State(format!("vocab_size {} too small", self.vocab_size)));
        }
        Ok(())
    }

    /// Same architecture truncated to the first `k` blocks.
    pub fn with_layers(&self, k: usize) -> Self {
        Self { n_layers: k, ..self.clone() }
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

impl BlockParams {
    pub fn ids(&self) -> [ParamId; 16] {
        [
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo, self.ln1_g,
            self.ln1_b, self.w1, self.b1, self.w2, self.b2, self.ln2_g, self.ln2_b,
        ]
    }
}

/// Embeddings plus a block stack; the main encoder and the frozen extractor
/// are both this shape.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<BlockParams>,
}

impl EncoderParams {
    pub fn ids(&self) -> Vec<ParamId> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for b in &self.blocks {
            out.extend(b.ids());
        }
        out
    }
}

/// Vocabulary projection for masked-token prediction; untied from the token
/// embedding matrix so freezing stays auditable per group.
#[derive(Debug, Clone)]
pub struct MlmHead {
    pub w: ParamId,
    pub b: ParamId,
}

impl MlmHead {
    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f32) -> f32 {
    loop {
        let x: f32 = rng.sample::<f32, _>(StandardNormal) * std;
        if x.abs() <= 2.0 * std {
            return x;
        }
    }
}

fn weight(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| trunc_normal(rng, INIT_STD)).collect();
    Tensor::matrix(rows, cols, data).expect("shape/data consistent by construction")
}

fn init_block(store: &mut ParamStore, cfg: &EncoderConfig, name: &str, frozen: bool, rng: &mut ChaCha8Rng) -> BlockParams {
    let d = cfg.d_model;
    let ff = cfg.d_ff;
    let mat = |suffix: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng, store: &mut ParamStore| {
        store.add(format!("{name}.{suffix}"), weight(rng, rows, cols), frozen)
    };
    let wq = mat("wq", d, d, rng, store);
    let wk = mat("wk", d, d, rng, store);
    let wv = mat("wv", d, d, rng, store);
    let wo = mat("wo", d, d, rng, store);
    let w1 = mat("w1", d, ff, rng, store);
    let w2 = mat("w2", ff, d, rng, store);
    let zeros = |store: &mut ParamStore, suffix: &str, n: usize| {
        store.add(format!("{name}.{suffix}"), Tensor::vector(vec![0.0; n]), frozen)
    };
    let ones = |store: &mut ParamStore, suffix: &str, n: usize| {
        store.add(format!("{name}.{suffix}"), Tensor::vector(vec![1.0; n]), frozen)
    };
    BlockParams {
        wq,
        bq: zeros(store, "bq", d),
        wk,
        bk: zeros(store, "bk", d),
        wv,
        bv: zeros(store, "bv", d),
        wo,
        bo: zeros(store, "bo", d),
        ln1_g: ones(store, "ln1_g", d),
        ln1_b: zeros(store, "ln1_b", d),
        w1,
        b1: zeros(store, "b1", ff),
        w2,
        b2: zeros(store, "b2", d),
        ln2_g: ones(store, "ln2_g", d),
        ln2_b: zeros(store, "ln2_b", d),
    }
}

/// Truncated-normal (std 0.02) weights, zero biases, unit layer-norm gains.
/// Deterministic for a given rng stream.
pub fn init_params(store: &mut ParamStore, cfg: &EncoderConfig, prefix: &str, rng: &mut ChaCha8Rng) -> Result<EncoderParams> {
    cfg.validate()?;
    let tok_emb = store.add(format!("{prefix}.tok_emb"), weight(rng, cfg.vocab_size, cfg.d_model), false);
    let pos_emb = store.add(format!("{prefix}.pos_emb"), weight(rng, cfg.max_seq_len, cfg.d_model), false);
    let blocks = (0..cfg.n_layers)
        .map(|i| init_block(store, cfg, &format!("{prefix}.b{i}"), false, rng))
        .collect();
    Ok(EncoderParams { tok_emb, pos_emb, blocks })
}

/// A bare block stack (no embeddings): the semantic feature fusioner.
pub fn init_blocks(store: &mut ParamStore, cfg: &EncoderConfig, n_blocks: usize, prefix: &str, rng: &mut ChaCha8Rng) -> Vec<BlockParams> {
    (0..n_blocks)
        .map(|i| init_block(store, cfg, &format!("{prefix}.b{i}"), false, rng))
        .collect()
}

pub fn init_mlm_head(store: &mut ParamStore, cfg: &EncoderConfig, prefix: &str, rng: &mut ChaCha8Rng) -> MlmHead {
    MlmHead {
        w: store.add(format!("{prefix}.w"), weight(rng, cfg.d_model, cfg.vocab_size), false),
        b: store.add(format!("{prefix}.b"), Tensor::vector(vec![0.0; cfg.vocab_size]), false),
    }
}

/// Learnable scalars of an encoder (embeddings + blocks), for the
/// closed-form parameter-count check.
pub fn encoder_param_count(cfg: &EncoderConfig) -> usize {
    let d = cfg.d_model;
    let ff = cfg.d_ff;
    let per_block = 4 * d * d + 4 * d          // attention projections + biases
        + 2 * (d * ff) + ff + d                // FFN weights + biases
        + 4 * d;                               // two layer norms
    cfg.vocab_size * d + cfg.max_seq_len * d + cfg.n_layers * per_block
}

pub fn mlm_head_param_count(cfg: &EncoderConfig) -> usize {
    cfg.d_model * cfg.vocab_size + cfg.vocab_size
}

/// One dropout-mask source: a train draw samples inverted-dropout masks
/// from its own stream, an eval draw applies none. Distinct streams give
/// independent masks, which is the whole positive-pair construction.
pub struct DropoutDraw {
    rng: Option<ChaCha8Rng>,
}

impl DropoutDraw {
    pub fn train(rng: ChaCha8Rng) -> Self {
        Self { rng: Some(rng) }
    }

    pub fn eval() -> Self {
        Self { rng: None }
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }

    /// Inverted-dropout mask: 0 with probability p, else 1/(1-p).
    pub fn sample_mask(&mut self, len: usize, p: f32) -> Option<Vec<f32>> {
        let rng = self.rng.as_mut()?;
        if p <= 0.0 {
            return None;
        }
        let keep_scale = 1.0 / (1.0 - p);
        Some((0..len).map(|_| if rng.gen::<f32>() < p { 0.0 } else { keep_scale }).collect())
    }
}

/// Flattened token ids and key-validity flags for a batch.
pub(crate) fn batch_layout(batch: &[TokenSeq], seq_len: usize) -> Result<(Vec<usize>, Vec<bool>)> {
    let mut ids = Vec::with_capacity(batch.len() * seq_len);
    let mut valid = Vec::with_capacity(batch.len() * seq_len);
    for seq in batch {
        if seq.ids.len() != seq_len {
            return Err(TensorError::ShapeMismatch {
                op: "encode_batch",
                detail: format!("sequence length {} != configured {}", seq.ids.len(), seq_len),
            });
        }
        ids.extend(seq.ids.iter().map(|&t| t as usize));
        valid.extend((0..seq_len).map(|t| t < seq.true_length));
    }
    Ok((ids, valid))
}

pub(crate) fn linear(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let xw = g.matmul(x, w)?;
    g.add_rows_cycled(xw, b)
}

/// Post-layer-norm transformer block with dropout on the attention
/// probabilities and on the FFN output.
fn transformer_block(
    g: &mut Graph,
    store: &ParamStore,
    bp: &BlockParams,
    cfg: &EncoderConfig,
    x: NodeId,
    valid: &[bool],
    draw: &mut DropoutDraw,
) -> Result<NodeId> {
    let p = cfg.max_seq_len;
    let n_sents = valid.len() / p;

    let wq = g.param(store, bp.wq);
    let bq = g.param(store, bp.bq);
    let wk = g.param(store, bp.wk);
    let bk = g.param(store, bp.bk);
    let wv = g.param(store, bp.wv);
    let bv = g.param(store, bp.bv);
    let q = linear(g, x, wq, bq)?;
    let k = linear(g, x, wk, bk)?;
    let v = linear(g, x, wv, bv)?;

    let probs_mask = draw.sample_mask(n_sents * cfg.n_heads * p * p, cfg.dropout_p);
    let att = g.attention(q, k, v, cfg.n_heads, p, valid, probs_mask)?;

    let wo = g.param(store, bp.wo);
    let bo = g.param(store, bp.bo);
    let att_o = linear(g, att, wo, bo)?;
    let res1 = g.add(x, att_o)?;
    let ln1_g = g.param(store, bp.ln1_g);
    let ln1_b = g.param(store, bp.ln1_b);
    let h1 = g.layer_norm(res1, ln1_g, ln1_b, LN_EPS)?;

    let w1 = g.param(store, bp.w1);
    let b1 = g.param(store, bp.b1);
    let w2 = g.param(store, bp.w2);
    let b2 = g.param(store, bp.b2);
    let f1 = linear(g, h1, w1, b1)?;
    let f1a = g.gelu(f1)?;
    let mut ffn = linear(g, f1a, w2, b2)?;
    if let Some(mask) = draw.sample_mask(g.value(ffn).len(), cfg.dropout_p) {
        ffn = g.dropout(ffn, mask)?;
    }
    let res2 = g.add(h1, ffn)?;
    let ln2_g = g.param(store, bp.ln2_g);
    let ln2_b = g.param(store, bp.ln2_b);
    g.layer_norm(res2, ln2_g, ln2_b, LN_EPS)
}

/// Run a block stack over already-embedded hidden states.
pub fn run_blocks(
    g: &mut Graph,
    store: &ParamStore,
    blocks: &[BlockParams],
    cfg: &EncoderConfig,
    mut x: NodeId,
    valid: &[bool],
    draw: &mut DropoutDraw,
) -> Result<NodeId> {
    for bp in blocks {
        x = transformer_block(g, store, bp, cfg, x, valid, draw)?;
    }
    Ok(x)
}

/// Full forward: embeddings (token + learned positional, then dropout) and
/// every block. Returns hidden states [n_sents * p, d_model].
pub fn encode_batch(
    g: &mut Graph,
    store: &ParamStore,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    batch: &[TokenSeq],
    draw: &mut DropoutDraw,
) -> Result<NodeId> {
    let (ids, valid) = batch_layout(batch, cfg.max_seq_len)?;
    let tok = g.param(store, params.tok_emb);
    let pos = g.param(store, params.pos_emb);
    let emb = g.gather_rows(tok, ids)?;
    let mut x = g.add_rows_cycled(emb, pos)?;
    if let Some(mask) = draw.sample_mask(g.value(x).len(), cfg.dropout_p) {
        x = g.dropout(x, mask)?;
    }
    run_blocks(g, store, &params.blocks, cfg, x, &valid, draw)
}

/// Position-0 hidden state of each sentence: [n_sents * p, d] -> [n_sents, d].
pub fn pool_cls(g: &mut Graph, hidden: NodeId, seq_len: usize) -> Result<NodeId> {
    g.take_row0(hidden, seq_len)
}

/// Deterministic eval-mode encoding on a throwaway graph.
pub fn encode_batch_eval(
    store: &ParamStore,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    batch: &[TokenSeq],
) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut draw = DropoutDraw::eval();
    let h = encode_batch(&mut g, store, params, cfg, batch, &mut draw)?;
    Ok(g.value(h).clone())
}

/// Eval-mode sentence embeddings [n_sents, d_model].
pub fn embed_sentences(
    store: &ParamStore,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    batch: &[TokenSeq],
) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut draw = DropoutDraw::eval();
    let h = encode_batch(&mut g, store, params, cfg, batch, &mut draw)?;
    let pooled = pool_cls(&mut g, h, cfg.max_seq_len)?;
    Ok(g.value(pooled).clone())
}

/// Copy embeddings and the first `k` blocks into frozen entries: the
/// lexical feature extractor. It only ever runs in eval mode.
pub fn split_extractor(
    store: &mut ParamStore,
    base: &EncoderParams,
    n_layers_base: usize,
    k: usize,
    prefix: &str,
) -> Result<EncoderParams> {
    if k == 0 || k > n_layers_base {
        return Err(TensorError::State(format!(
            "extractor layer count {k} out of range 1..={n_layers_base}"
        )));
    }
    let copy = |store: &mut ParamStore, id: ParamId, name: String| {
        let value = store.value(id).clone();
        store.add(name, value, true)
    };
    let tok_emb = copy(store, base.tok_emb, format!("{prefix}.tok_emb"));
    let pos_emb = copy(store, base.pos_emb, format!("{prefix}.pos_emb"));
    let mut blocks = Vec::with_capacity(k);
    for (i, b) in base.blocks.iter().take(k).enumerate() {
        let fields = b.ids();
        let names = [
            "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_g", "ln1_b", "w1", "b1", "w2",
            "b2", "ln2_g", "ln2_b",
        ];
        let mut copied = Vec::with_capacity(16);
        for (id, suffix) in fields.iter().zip(names) {
            copied.push(copy(store, *id, format!("{prefix}.b{i}.{suffix}")));
        }
        blocks.push(BlockParams {
            wq: copied[0],
            bq: copied[1],
            wk: copied[2],
            bk: copied[3],
            wv: copied[4],
            bv: copied[5],
            wo: copied[6],
            bo: copied[7],
            ln1_g: copied[8],
            ln1_b: copied[9],
            w1: copied[10],
            b1: copied[11],
            w2: copied[12],
            b2: copied[13],
            ln2_g: copied[14],
            ln2_b: copied[15],
        });
    }
    Ok(EncoderParams { tok_emb, pos_emb, blocks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::text::{encode, Vocab};

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 32,
            dropout_p: 0.1,
            max_seq_len: 8,
            vocab_size: 32,
        }
    }

    fn tiny_setup() -> (ParamStore, EncoderParams, EncoderConfig, Vocab, Vec<TokenSeq>) {
        let cfg = tiny_cfg();
        let corpus: Vec<String> =
            vec!["the cat sat on the mat".into(), "a dog ran far away".into(), "birds fly south".into()];
        let vocab = Vocab::build(&corpus, cfg.vocab_size).unwrap();
        let batch: Vec<TokenSeq> = corpus.iter().map(|s| encode(s, &vocab, cfg.max_seq_len)).collect();
        let mut store = ParamStore::new();
        let mut rng = stream_rng(1, "init", 0);
        let params = init_params(&mut store, &cfg, "main", &mut rng).unwrap();
        (store, params, cfg, vocab, batch)
    }

    #[test]
    fn init_is_deterministic_per_seed_and_differs_across_seeds() {
        let cfg = tiny_cfg();
        let build = |seed: u64| {
            let mut store = ParamStore::new();
            let mut rng = stream_rng(seed, "init", 0);
            let p = init_params(&mut store, &cfg, "m", &mut rng).unwrap();
            let flat: Vec<f32> = p.ids().iter().flat_map(|&id| store.value(id).data().to_vec()).collect();
            flat
        };
        assert_eq!(build(7), build(7));
        assert_ne!(build(7), build(8));
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut rng = stream_rng(3, "init", 0);
        let p = init_params(&mut store, &cfg, "m", &mut rng).unwrap();
        let total: usize = p.ids().iter().map(|&id| store.value(id).len()).sum();
        assert_eq!(total, encoder_param_count(&cfg));

        let head = init_mlm_head(&mut store, &cfg, "head", &mut rng);
        let head_total: usize = head.ids().iter().map(|&id| store.value(id).len()).sum();
        assert_eq!(head_total, mlm_head_param_count(&cfg));
    }

    #[test]
    fn zero_dropout_passes_are_bit_identical() {
        let (store, params, mut cfg, _v, batch) = tiny_setup();
        cfg.dropout_p = 0.0;
        let run = |stream: u64| {
            let mut g = Graph::new();
            let mut draw = DropoutDraw::train(stream_rng(5, "drop", stream));
            let h = encode_batch(&mut g, &store, &params, &cfg, &batch, &mut draw).unwrap();
            g.value(h).data().to_vec()
        };
        assert_eq!(run(0), run(1));
    }

    #[test]
    fn distinct_dropout_draws_give_different_outputs() {
        let (store, params, cfg, _v, batch) = tiny_setup();
        let run = |stream: u64| {
            let mut g = Graph::new();
            let mut draw = DropoutDraw::train(stream_rng(5, "drop", stream));
            let h = encode_batch(&mut g, &store, &params, &cfg, &batch, &mut draw).unwrap();
            g.value(h).data().to_vec()
        };
        assert_ne!(run(0), run(1));
    }

    #[test]
    fn eval_mode_is_a_pure_function() {
        let (store, params, cfg, _v, batch) = tiny_setup();
        let a = encode_batch_eval(&store, &params, &cfg, &batch).unwrap();
        let b = encode_batch_eval(&store, &params, &cfg, &batch).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn wrong_sequence_length_is_a_shape_error() {
        let (store, params, cfg, vocab, _batch) = tiny_setup();
        let bad = encode("the cat", &vocab, cfg.max_seq_len + 1);
        let mut g = Graph::new();
        let mut draw = DropoutDraw::eval();
        assert!(encode_batch(&mut g, &store, &params, &cfg, &[bad], &mut draw).is_err());
    }

    #[test]
    fn attention_to_pad_positions_is_exactly_zero() {
        let (store, params, cfg, vocab, _b) = tiny_setup();
        // two sentences of different lengths; the short one has PAD keys
        let batch =
            vec![encode("the cat sat on the mat", &vocab, cfg.max_seq_len), encode("a dog", &vocab, cfg.max_seq_len)];
        let mut g = Graph::new();
        let mut draw = DropoutDraw::eval();
        let _ = encode_batch(&mut g, &store, &params, &cfg, &batch, &mut draw).unwrap();
        let (_, valid) = batch_layout(&batch, cfg.max_seq_len).unwrap();
        let mut inspected = 0;
        for id in 0..g.node_count() {
            if let Some((probs, n_heads, p)) = g.attention_probs(id) {
                let n_sents = valid.len() / p;
                for s in 0..n_sents {
                    for h in 0..n_heads {
                        for i in 0..p {
                            let base = ((s * n_heads + h) * p + i) * p;
                            let mut pad_sum = 0.0f32;
                            let mut all_sum = 0.0f32;
                            for j in 0..p {
                                all_sum += probs[base + j];
                                if !valid[s * p + j] {
                                    pad_sum += probs[base + j];
                                }
                            }
                            assert_eq!(pad_sum, 0.0);
                            assert!((all_sum - 1.0).abs() < 1e-6);
                        }
                    }
                }
                inspected += 1;
            }
        }
        assert_eq!(inspected, cfg.n_layers);
    }

    #[test]
    fn pool_cls_slices_position_zero_and_ignores_the_rest() {
        let mut g = Graph::new();
        // 2 sentences, seq_len 3, d 2
        let hidden = g.var(
            Tensor::matrix(6, 2, vec![1.0, 2.0, 9.0, 9.0, 9.0, 9.0, 3.0, 4.0, 9.0, 9.0, 9.0, 9.0]).unwrap(),
        );
        let pooled = pool_cls(&mut g, hidden, 3).unwrap();
        assert_eq!(g.value(pooled).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn pooled_loss_has_zero_gradient_at_non_cls_positions() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let hidden = g.var(Tensor::matrix(6, 2, (0..12).map(|i| i as f32 * 0.1).collect()).unwrap());
        let pooled = pool_cls(&mut g, hidden, 3).unwrap();
        let loss = g.sum_all(pooled).unwrap();
        g.backward(loss, &mut store).unwrap();
        let grad = g.grad(hidden).unwrap();
        for (r, chunk) in grad.chunks(2).enumerate() {
            if r % 3 == 0 {
                assert_eq!(chunk, &[1.0, 1.0]);
            } else {
                assert_eq!(chunk, &[0.0, 0.0]);
            }
        }
    }

    #[test]
    fn split_extractor_full_copy_matches_base_eval_output() {
        let (mut store, params, cfg, _v, batch) = tiny_setup();
        let ext = split_extractor(&mut store, &params, cfg.n_layers, cfg.n_layers, "ext").unwrap();
        let base_out = encode_batch_eval(&store, &params, &cfg, &batch).unwrap();
        let ext_out = encode_batch_eval(&store, &ext, &cfg, &batch).unwrap();
        assert_eq!(base_out.data(), ext_out.data());
    }

    #[test]
    fn split_extractor_marks_every_group_frozen() {
        let (mut store, params, cfg, _v, _b) = tiny_setup();
        let ext = split_extractor(&mut store, &params, cfg.n_layers, 1, "ext").unwrap();
        for id in ext.ids() {
            assert!(store.is_frozen(id), "{} not frozen", store.name(id));
        }
        assert!(split_extractor(&mut store, &params, cfg.n_layers, 0, "e2").is_err());
        assert!(split_extractor(&mut store, &params, cfg.n_layers, cfg.n_layers + 1, "e3").is_err());
    }

    #[test]
    fn layer_norm_outputs_are_standardized_at_init() {
        // at init gains are 1 and biases 0, so block outputs are the raw
        // normalized rows
        let (store, params, cfg, _v, batch) = tiny_setup();
        let out = encode_batch_eval(&store, &params, &cfg, &batch).unwrap();
        let d = cfg.d_model as f32;
        for r in 0..out.rows() {
            let row = out.row(r);
            let mean = row.iter().sum::<f32>() / d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / d;
            assert!(mean.abs() < 1e-5, "row {r} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "row {r} var {var}");
        }
    }

    #[test]
    fn inverted_dropout_preserves_expected_activation_scale() {
        let p = 0.1f32;
        let x = 0.7f32;
        let mut draw = DropoutDraw::train(stream_rng(11, "exp", 0));
        let n = 10_000;
        let mut sum = 0.0f64;
        for _ in 0..n {
            let mask = draw.sample_mask(1, p).unwrap();
            sum += (x * mask[0]) as f64;
        }
        let mean = sum / n as f64;
        let rel = (mean - x as f64).abs() / x as f64;
        assert!(rel < 0.01, "mean {mean} vs eval activation {x}");
    }
}
