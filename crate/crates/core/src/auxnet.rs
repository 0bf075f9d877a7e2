//! The conditional-MLM auxiliary network.
//!
//! The masked sentence goes through the frozen lexical feature extractor
//! (eval mode, off-graph — no gradient can reach it even in principle).
//! Position 0 of those features is then replaced by the sentence embedding
//! from the contrastive side, the fused sequence runs through the small
//! trainable fusioner stack, and a vocabulary projection scores every
//! position. The loss reads only the masked positions, so the only route by
//! which the network can get better at restoring masked words is through
//! the fusioner weights and through `h` itself — which is the pressure that
//! pushes token-level information into the sentence embedding.

use crate::encoder::{
    batch_layout, encode_batch, linear, run_blocks, BlockParams, DropoutDraw, EncoderConfig,
    EncoderParams, MlmHead,
};
use crate::tensor::{Graph, NodeId, ParamStore, Result, Tensor, TensorError};
use crate::text::{MaskedSeq, TokenSeq};

/// Hidden states of the masked batch from the frozen extractor,
/// [n_sents * p, d_model]. A plain value: nothing differentiates through it.
#[derive(Debug, Clone)]
pub struct LexicalFeatures {
    pub hidden: Tensor,
    pub n_sents: usize,
    pub seq_len: usize,
}

pub fn masked_to_batch(masked: &[MaskedSeq]) -> Vec<TokenSeq> {
    masked.iter().map(|m| m.as_token_seq()).collect()
}

/// Run the frozen extractor over the masked batch in eval mode.
///
/// `draw` must be an eval draw and every extractor parameter must carry the
/// frozen flag; anything else is a contract violation, not a silent run.
pub fn lexical_features(
    store: &ParamStore,
    extractor: &EncoderParams,
    extractor_cfg: &EncoderConfig,
    masked: &[MaskedSeq],
    draw: &DropoutDraw,
) -> Result<LexicalFeatures> {
    if draw.is_train() {
        return Err(TensorError::State(
            "lexical feature extractor must run in eval mode (train-mode draw supplied)".into(),
        ));
    }
    if let Some(id) = extractor.ids().into_iter().find(|&id| !store.is_frozen(id)) {
        return Err(TensorError::State(format!(
            "extractor parameter {} is not frozen",
            store.name(id)
        )));
    }
    let batch = masked_to_batch(masked);
    let mut g = Graph::new();
    let mut eval = DropoutDraw::eval();
    let h = encode_batch(&mut g, store, extractor, extractor_cfg, &batch, &mut eval)?;
    Ok(LexicalFeatures {
        hidden: g.value(h).clone(),
        n_sents: masked.len(),
        seq_len: extractor_cfg.max_seq_len,
    })
}

/// Splice the sentence embeddings into position 0 of the lexical features,
/// run the fusioner blocks (train-mode dropout allowed), and project every
/// position onto the vocabulary. Returns logits [n_sents * p, V].
///
/// Gradients flow into the fusioner, the head, and `h` — not into the
/// extractor output, which enters as a constant.
pub fn fuse_and_predict(
    g: &mut Graph,
    store: &ParamStore,
    fusioner: &[BlockParams],
    head: &MlmHead,
    fusioner_cfg: &EncoderConfig,
    h: NodeId,
    features: &LexicalFeatures,
    masked: &[MaskedSeq],
    draw: &mut DropoutDraw,
) -> Result<NodeId> {
    let d = fusioner_cfg.d_model;
    if g.value(h).cols() != d || features.hidden.cols() != d {
        return Err(TensorError::ShapeMismatch {
            op: "fuse_and_predict",
            detail: format!(
                "d_model {d} vs h cols {} and features cols {}",
                g.value(h).cols(),
                features.hidden.cols()
            ),
        });
    }
    if g.value(h).rows() != features.n_sents {
        return Err(TensorError::ShapeMismatch {
            op: "fuse_and_predict",
            detail: format!("{} embeddings for {} sentences", g.value(h).rows(), features.n_sents),
        });
    }
    let batch = masked_to_batch(masked);
    let (_, valid) = batch_layout(&batch, features.seq_len)?;
    let hp = g.constant(features.hidden.clone());
    let fused = g.splice_row0(hp, h, features.seq_len)?;
    let out = run_blocks(g, store, fusioner, fusioner_cfg, fused, &valid, draw)?;
    let w = g.param(store, head.w);
    let b = g.param(store, head.b);
    linear(g, out, w, b)
}

/// Mean softmax cross-entropy at the masked positions only. Logits at
/// unmasked positions never enter the loss.
pub fn conditional_mlm_loss(
    g: &mut Graph,
    logits: NodeId,
    masked: &[MaskedSeq],
    seq_len: usize,
) -> Result<NodeId> {
    let (rows, targets) = masked_rows_and_targets(masked, seq_len)?;
    let picked = g.gather_rows(logits, rows)?;
    g.cross_entropy_rows(picked, targets)
}

/// Flattened logit-row indices and target ids of every masked position.
pub fn masked_rows_and_targets(masked: &[MaskedSeq], seq_len: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (s, m) in masked.iter().enumerate() {
        for (&pos, &target) in m.mask_positions.iter().zip(&m.targets) {
            rows.push(s * seq_len + pos);
            targets.push(target as usize);
        }
    }
    if rows.is_empty() {
        return Err(TensorError::State(
            "conditional MLM loss over an empty mask set (floor-of-one rule violated upstream)".into(),
        ));
    }
    Ok((rows, targets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_blocks, init_mlm_head, init_params, pool_cls, split_extractor};
    use crate::rng::stream_rng;
    use crate::tensor::gradcheck;
    use crate::text::{encode, mask_tokens, Vocab};

    struct Fixture {
        store: ParamStore,
        main: EncoderParams,
        extractor: EncoderParams,
        fusioner: Vec<BlockParams>,
        head: MlmHead,
        cfg: EncoderConfig,
        ext_cfg: EncoderConfig,
        batch: Vec<TokenSeq>,
        masked: Vec<MaskedSeq>,
    }

    fn fixture() -> Fixture {
        let cfg = EncoderConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 32,
            dropout_p: 0.1,
            max_seq_len: 8,
            vocab_size: 32,
        };
        let corpus: Vec<String> =
            vec!["the cat sat on the mat".into(), "a dog ran far away".into()];
        let vocab = Vocab::build(&corpus, cfg.vocab_size).unwrap();
        let batch: Vec<TokenSeq> =
            corpus.iter().map(|s| encode(s, &vocab, cfg.max_seq_len)).collect();
        let masked: Vec<MaskedSeq> = batch
            .iter()
            .enumerate()
            .map(|(i, s)| mask_tokens(s, 0.4, &mut stream_rng(3, "mask", i as u64)).unwrap())
            .collect();
        let mut store = ParamStore::new();
        let mut rng = stream_rng(1, "init", 0);
        let main = init_params(&mut store, &cfg, "main", &mut rng).unwrap();
        let extractor = split_extractor(&mut store, &main, cfg.n_layers, 1, "ext").unwrap();
        let fusioner = init_blocks(&mut store, &cfg, 1, "fus", &mut rng);
        let head = init_mlm_head(&mut store, &cfg, "head", &mut rng);
        let ext_cfg = cfg.with_layers(1);
        Fixture { store, main, extractor, fusioner, head, cfg, ext_cfg, batch, masked }
    }

    fn forward_loss(f: &Fixture) -> (Graph, NodeId, NodeId) {
        let mut g = Graph::new();
        let mut d1 = DropoutDraw::eval();
        let hidden = encode_batch(&mut g, &f.store, &f.main, &f.cfg, &f.batch, &mut d1).unwrap();
        let h = pool_cls(&mut g, hidden, f.cfg.max_seq_len).unwrap();
        let feats =
            lexical_features(&f.store, &f.extractor, &f.ext_cfg, &f.masked, &DropoutDraw::eval()).unwrap();
        let mut fus_draw = DropoutDraw::eval();
        let logits = fuse_and_predict(
            &mut g, &f.store, &f.fusioner, &f.head, &f.cfg, h, &feats, &f.masked, &mut fus_draw,
        )
        .unwrap();
        let loss = conditional_mlm_loss(&mut g, logits, &f.masked, f.cfg.max_seq_len).unwrap();
        (g, loss, h)
    }

    #[test]
    fn extractor_rejects_train_mode_and_unfrozen_params() {
        let f = fixture();
        let train_draw = DropoutDraw::train(stream_rng(0, "d", 0));
        assert!(lexical_features(&f.store, &f.extractor, &f.ext_cfg, &f.masked, &train_draw).is_err());

        let mut store2 = ParamStore::new();
        let mut rng = stream_rng(1, "init", 0);
        let not_frozen = init_params(&mut store2, &f.ext_cfg, "e", &mut rng).unwrap();
        assert!(lexical_features(&store2, &not_frozen, &f.ext_cfg, &f.masked, &DropoutDraw::eval()).is_err());
    }

    #[test]
    fn lexical_features_deterministic_with_expected_shape() {
        let f = fixture();
        let a = lexical_features(&f.store, &f.extractor, &f.ext_cfg, &f.masked, &DropoutDraw::eval()).unwrap();
        let b = lexical_features(&f.store, &f.extractor, &f.ext_cfg, &f.masked, &DropoutDraw::eval()).unwrap();
        assert_eq!(a.hidden.data(), b.hidden.data());
        assert_eq!(a.hidden.shape(), &[f.masked.len() * f.cfg.max_seq_len, f.cfg.d_model]);
    }

    #[test]
    fn downstream_loss_leaves_extractor_gradient_exactly_zero() {
        let mut f = fixture();
        let (mut g, loss, _) = forward_loss(&f);
        g.backward(loss, &mut f.store).unwrap();
        for id in f.extractor.ids() {
            assert!(f.store.grad(id).iter().all(|&v| v == 0.0), "{}", f.store.name(id));
        }
        // and the trainable groups did receive gradient
        let got: f32 = f.fusioner[0].ids().iter().map(|&id| f.store.grad(id).iter().map(|v| v.abs()).sum::<f32>()).sum();
        assert!(got > 0.0);
    }

    #[test]
    fn fused_sequence_is_h_at_position_zero_and_features_elsewhere() {
        let f = fixture();
        let feats =
            lexical_features(&f.store, &f.extractor, &f.ext_cfg, &f.masked, &DropoutDraw::eval()).unwrap();
        let n = f.masked.len();
        let d = f.cfg.d_model;
        let p = f.cfg.max_seq_len;
        let mut g = Graph::new();
        let h = g.var(Tensor::matrix(n, d, (0..n * d).map(|i| i as f32).collect()).unwrap());
        let hp = g.constant(feats.hidden.clone());
        let fused = g.splice_row0(hp, h, p).unwrap();
        let fd = g.value(fused);
        for s in 0..n {
            for j in 0..d {
                assert_eq!(fd.data()[s * p * d + j], (s * d + j) as f32);
            }
            for t in 1..p {
                for j in 0..d {
                    assert_eq!(fd.data()[(s * p + t) * d + j], feats.hidden.data()[(s * p + t) * d + j]);
                }
            }
        }
    }

    #[test]
    fn loss_gradient_with_respect_to_h_is_nonzero_and_checks() {
        let f = fixture();
        let feats =
            lexical_features(&f.store, &f.extractor, &f.ext_cfg, &f.masked, &DropoutDraw::eval()).unwrap();
        let n = f.masked.len();
        let d = f.cfg.d_model;
        let mut rng = stream_rng(9, "h", 0);
        use rand::Rng;
        let h0 = Tensor::matrix(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();

        // analytic gradient w.r.t. h is nonzero
        let mut g = Graph::new();
        let h = g.var(h0.clone());
        let mut draw = DropoutDraw::eval();
        let logits = fuse_and_predict(
            &mut g, &f.store, &f.fusioner, &f.head, &f.cfg, h, &feats, &f.masked, &mut draw,
        )
        .unwrap();
        let loss = conditional_mlm_loss(&mut g, logits, &f.masked, f.cfg.max_seq_len).unwrap();
        g.backward_nodes(loss).unwrap();
        let gh = g.grad(h).unwrap();
        assert!(gh.iter().any(|&v| v != 0.0), "conditional channel is dead");

        // and agrees with central differences
        let report = gradcheck(
            |g, vars| {
                let mut draw = DropoutDraw::eval();
                let logits = fuse_and_predict(
                    g, &f.store, &f.fusioner, &f.head, &f.cfg, vars[0], &feats, &f.masked, &mut draw,
                )?;
                conditional_mlm_loss(g, logits, &f.masked, f.cfg.max_seq_len)
            },
            &[h0],
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn perturbing_extractor_inputs_also_changes_logits() {
        let f = fixture();
        let run = |masked: &[MaskedSeq]| {
            let feats =
                lexical_features(&f.store, &f.extractor, &f.ext_cfg, masked, &DropoutDraw::eval()).unwrap();
            let mut g = Graph::new();
            let h = g.var(Tensor::matrix(masked.len(), f.cfg.d_model, vec![0.5; masked.len() * f.cfg.d_model]).unwrap());
            let mut draw = DropoutDraw::eval();
            let logits = fuse_and_predict(
                &mut g, &f.store, &f.fusioner, &f.head, &f.cfg, h, &feats, masked, &mut draw,
            )
            .unwrap();
            g.value(logits).data().to_vec()
        };
        let base = run(&f.masked);
        let mut altered = f.masked.clone();
        // change one unmasked content token of sentence 0
        let pos = (1..altered[0].true_length)
            .find(|p| !altered[0].mask_positions.contains(p))
            .unwrap();
        altered[0].ids[pos] = if altered[0].ids[pos] == 5 { 6 } else { 5 };
        let changed = run(&altered);
        assert_ne!(base, changed, "lexical path is dead");
    }

    #[test]
    fn uniform_logits_loss_is_ln_v() {
        let f = fixture();
        let v = 50usize;
        let rows = f.masked.len() * f.cfg.max_seq_len;
        let mut g = Graph::new();
        let logits = g.var(Tensor::matrix(rows, v, vec![0.0; rows * v]).unwrap());
        // targets must be < 50; fixture vocab is 32 so they are
        let loss = conditional_mlm_loss(&mut g, logits, &f.masked, f.cfg.max_seq_len).unwrap();
        assert!((g.scalar_value(loss) - (v as f32).ln()).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_logits_loss_is_near_zero() {
        let f = fixture();
        let v = f.cfg.vocab_size;
        let rows = f.masked.len() * f.cfg.max_seq_len;
        let mut data = vec![-30.0f32; rows * v];
        for (s, m) in f.masked.iter().enumerate() {
            for (&pos, &t) in m.mask_positions.iter().zip(&m.targets) {
                data[(s * f.cfg.max_seq_len + pos) * v + t as usize] = 30.0;
            }
        }
        let mut g = Graph::new();
        let logits = g.var(Tensor::matrix(rows, v, data).unwrap());
        let loss = conditional_mlm_loss(&mut g, logits, &f.masked, f.cfg.max_seq_len).unwrap();
        assert!(g.scalar_value(loss) < 1e-9);
    }

    #[test]
    fn random_logits_match_f64_per_position_oracle() {
        let f = fixture();
        let v = f.cfg.vocab_size;
        let p = f.cfg.max_seq_len;
        let rows = f.masked.len() * p;
        let mut rng = stream_rng(21, "logits", 0);
        use rand::Rng;
        let data: Vec<f32> = (0..rows * v).map(|_| rng.gen_range(-2.0..2.0)).collect();

        // oracle: stable per-position CE in f64
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (s, m) in f.masked.iter().enumerate() {
            for (&pos, &t) in m.mask_positions.iter().zip(&m.targets) {
                let row: Vec<f64> =
                    data[(s * p + pos) * v..(s * p + pos + 1) * v].iter().map(|&x| x as f64).collect();
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
                total += lse - row[t as usize];
                count += 1;
            }
        }
        let expected = total / count as f64;
        assert!(count >= 3, "fixture should mask at least 3 positions, got {count}");

        let mut g = Graph::new();
        let logits = g.var(Tensor::matrix(rows, v, data).unwrap());
        let loss = conditional_mlm_loss(&mut g, logits, &f.masked, p).unwrap();
        let got = g.scalar_value(loss) as f64;
        let rel = (got - expected).abs() / expected.abs();
        assert!(rel < 1e-6, "got {got}, oracle {expected}");
    }

    #[test]
    fn loss_ignores_logits_at_unmasked_positions_exactly() {
        let f = fixture();
        let v = f.cfg.vocab_size;
        let p = f.cfg.max_seq_len;
        let rows = f.masked.len() * p;
        let mut rng = stream_rng(22, "logits", 0);
        use rand::Rng;
        let base: Vec<f32> = (0..rows * v).map(|_| rng.gen_range(-2.0..2.0)).collect();

        let eval = |data: Vec<f32>| {
            let mut g = Graph::new();
            let logits = g.var(Tensor::matrix(rows, v, data).unwrap());
            let loss = conditional_mlm_loss(&mut g, logits, &f.masked, p).unwrap();
            g.scalar_value(loss).to_bits()
        };
        let mut perturbed = base.clone();
        for (s, m) in f.masked.iter().enumerate() {
            for t in 0..p {
                if !m.mask_positions.contains(&t) {
                    for j in 0..v {
                        perturbed[(s * p + t) * v + j] += 13.7;
                    }
                }
            }
        }
        assert_eq!(eval(base), eval(perturbed));
    }

    #[test]
    fn empty_mask_set_is_a_contract_violation() {
        let f = fixture();
        let empty = vec![MaskedSeq {
            ids: f.batch[0].ids.clone(),
            true_length: f.batch[0].true_length,
            mask_positions: vec![],
            targets: vec![],
        }];
        let mut g = Graph::new();
        let logits = g.var(Tensor::matrix(f.cfg.max_seq_len, 8, vec![0.0; f.cfg.max_seq_len * 8]).unwrap());
        assert!(conditional_mlm_loss(&mut g, logits, &empty, f.cfg.max_seq_len).is_err());
    }
}
