//! Dual-dropout positive pairs and the in-batch InfoNCE contrastive loss.
//!
//! The same token batch is encoded twice under independent dropout draws;
//! row i of the two pooled matrices is then a positive pair and every other
//! second-pass row is a negative. The loss is the mean over rows of
//! -log softmax(sim(h_i, h_j+)/tau)[i], with sim the cosine similarity —
//! computed here as row normalization followed by a Gram matrix, and
//! stabilized by row-max subtraction inside the cross entropy. The
//! denominator keeps the diagonal term.

use serde::{Deserialize, Serialize};

use crate::encoder::{encode_batch, pool_cls, DropoutDraw, EncoderConfig, EncoderParams};
use crate::tensor::{Graph, NodeId, ParamStore, Result, TensorError};
use crate::text::TokenSeq;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ContrastiveConfig {
    pub temperature: f32,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { temperature: 0.05 }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(TensorError::State(format!(
                "temperature {} must be > 0",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Pooled embeddings of the two passes; rows index the same sentences.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingPairBatch {
    /// First pass, also the embedding fed to the auxiliary network.
    pub h: NodeId,
    /// Second pass (independent dropout or an augmented view).
    pub h_plus: NodeId,
    pub n: usize,
}

/// With dropout disabled the two passes coincide and the loss degenerates;
/// callers surface this once per run.
pub fn degenerate_dropout_warning(cfg: &EncoderConfig) -> Option<String> {
    if cfg.dropout_p == 0.0 {
        Some(
            "dropout_p = 0: both encoder passes are identical, so every positive pair is exact \
             and the contrastive loss carries no augmentation signal"
                .to_string(),
        )
    } else {
        None
    }
}

/// Encode the identical batch twice with independent dropout draws and pool
/// at position 0.
pub fn simcse_forward(
    g: &mut Graph,
    store: &ParamStore,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    batch: &[TokenSeq],
    draw1: &mut DropoutDraw,
    draw2: &mut DropoutDraw,
) -> Result<EmbeddingPairBatch> {
    let hidden1 = encode_batch(g, store, params, cfg, batch, draw1)?;
    let hidden2 = encode_batch(g, store, params, cfg, batch, draw2)?;
    let h = pool_cls(g, hidden1, cfg.max_seq_len)?;
    let h_plus = pool_cls(g, hidden2, cfg.max_seq_len)?;
    Ok(EmbeddingPairBatch { h, h_plus, n: batch.len() })
}

/// Positive pair from an augmented second view instead of a second dropout
/// pass (word repetition / drop-one-word comparisons).
pub fn augmented_forward(
    g: &mut Graph,
    store: &ParamStore,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    batch: &[TokenSeq],
    view2: &[TokenSeq],
    draw1: &mut DropoutDraw,
    draw2: &mut DropoutDraw,
) -> Result<EmbeddingPairBatch> {
    if batch.len() != view2.len() {
        return Err(TensorError::ShapeMismatch {
            op: "augmented_forward",
            detail: format!("views of {} vs {} sentences", batch.len(), view2.len()),
        });
    }
    let hidden1 = encode_batch(g, store, params, cfg, batch, draw1)?;
    let hidden2 = encode_batch(g, store, params, cfg, view2, draw2)?;
    let h = pool_cls(g, hidden1, cfg.max_seq_len)?;
    let h_plus = pool_cls(g, hidden2, cfg.max_seq_len)?;
    Ok(EmbeddingPairBatch { h, h_plus, n: batch.len() })
}

/// (1/N) sum_i -log( exp(sim(h_i, h_i+)/tau) / sum_j exp(sim(h_i, h_j+)/tau) ).
pub fn info_nce_loss(g: &mut Graph, pairs: &EmbeddingPairBatch, temperature: f32) -> Result<NodeId> {
    if !(temperature > 0.0) {
        return Err(TensorError::State(format!("temperature {temperature} must be > 0")));
    }
    if pairs.n == 1 {
        // numerator equals the whole denominator: identically zero, with an
        // identically zero gradient
        let hn = g.rows_normalize(pairs.h)?;
        let hpn = g.rows_normalize(pairs.h_plus)?;
        let _ = (hn, hpn); // degenerate-input checks still apply
        return Ok(g.constant(crate::tensor::Tensor::scalar(0.0)));
    }
    let hn = g.rows_normalize(pairs.h)?;
    let hpn = g.rows_normalize(pairs.h_plus)?;
    let sims = g.matmul_nt(hn, hpn)?; // [N, N] of cosines
    let logits = g.scale(sims, 1.0 / temperature)?;
    let targets: Vec<usize> = (0..pairs.n).collect();
    g.cross_entropy_rows(logits, targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::tensor::{gradcheck, Tensor};
    use crate::text::{encode, Vocab};

    fn pairs_from(g: &mut Graph, h: Tensor, hp: Tensor) -> EmbeddingPairBatch {
        let n = h.rows();
        let h = g.var(h);
        let h_plus = g.var(hp);
        EmbeddingPairBatch { h, h_plus, n }
    }

    /// f64 double-loop restatement of the loss definition.
    fn oracle(h: &Tensor, hp: &Tensor, tau: f64) -> f64 {
        let n = h.rows();
        let d = h.cols();
        let cos = |a: &[f32], b: &[f32]| -> f64 {
            let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
            let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let mut total = 0.0;
        for i in 0..n {
            let hi = &h.data()[i * d..(i + 1) * d];
            let num = (cos(hi, &hp.data()[i * d..(i + 1) * d]) / tau).exp();
            let mut den = 0.0;
            for j in 0..n {
                den += (cos(hi, &hp.data()[j * d..(j + 1) * d]) / tau).exp();
            }
            total += -(num / den).ln();
        }
        total / n as f64
    }

    #[test]
    fn single_pair_loss_is_exactly_zero() {
        let mut g = Graph::new();
        let pairs = pairs_from(
            &mut g,
            Tensor::matrix(1, 3, vec![0.3, -0.2, 0.9]).unwrap(),
            Tensor::matrix(1, 3, vec![0.1, 0.8, -0.4]).unwrap(),
        );
        let loss = info_nce_loss(&mut g, &pairs, 0.05).unwrap();
        assert_eq!(g.scalar_value(loss), 0.0);
    }

    #[test]
    fn symmetric_two_pair_batch_gives_ln_two() {
        // all four pairwise similarities equal -> uniform softmax
        let mut g = Graph::new();
        let row = vec![0.6, 0.8];
        let h = Tensor::matrix(2, 2, [row.clone(), row.clone()].concat()).unwrap();
        let hp = h.clone();
        let pairs = pairs_from(&mut g, h, hp);
        let loss = info_nce_loss(&mut g, &pairs, 1.0).unwrap();
        assert!((g.scalar_value(loss) - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn random_batch_matches_f64_double_loop_oracle() {
        let mut rng = stream_rng(13, "nce", 0);
        use rand::Rng;
        let h = Tensor::matrix(4, 8, (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let hp = Tensor::matrix(4, 8, (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let expected = oracle(&h, &hp, 0.05);
        let mut g = Graph::new();
        let pairs = pairs_from(&mut g, h, hp);
        let loss = info_nce_loss(&mut g, &pairs, 0.05).unwrap();
        let got = g.scalar_value(loss) as f64;
        let rel = (got - expected).abs() / expected.abs().max(1e-12);
        assert!(rel < 1e-5, "got {got}, oracle {expected}, rel {rel}");
    }

    #[test]
    fn loss_is_invariant_to_positive_row_scaling() {
        let mut rng = stream_rng(29, "nce", 1);
        use rand::Rng;
        let base: Vec<f32> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let hp: Vec<f32> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let run = |scale_row: Option<usize>| {
            let mut data = base.clone();
            if let Some(r) = scale_row {
                for v in &mut data[r * 8..(r + 1) * 8] {
                    *v *= 3.5;
                }
            }
            let mut g = Graph::new();
            let pairs = pairs_from(
                &mut g,
                Tensor::matrix(3, 8, data).unwrap(),
                Tensor::matrix(3, 8, hp.clone()).unwrap(),
            );
            let loss = info_nce_loss(&mut g, &pairs, 0.05).unwrap();
            g.scalar_value(loss)
        };
        let unscaled = run(None);
        let scaled = run(Some(1));
        assert!((unscaled - scaled).abs() < 1e-5, "{unscaled} vs {scaled}");
    }

    #[test]
    fn loss_decreases_when_positive_similarity_rises() {
        // orthogonal basis: raising the diagonal similarity with all other
        // entries fixed must lower the loss
        let build = |diag: f32| {
            let mut h = vec![0.0f32; 2 * 4];
            let mut hp = vec![0.0f32; 2 * 4];
            // h_i = e_i; h_i+ = diag * e_i + (1 - diag) * e_{i+2}
            for i in 0..2 {
                h[i * 4 + i] = 1.0;
                hp[i * 4 + i] = diag;
                hp[i * 4 + i + 2] = 1.0 - diag;
            }
            let mut g = Graph::new();
            let pairs = pairs_from(
                &mut g,
                Tensor::matrix(2, 4, h).unwrap(),
                Tensor::matrix(2, 4, hp).unwrap(),
            );
            let loss = info_nce_loss(&mut g, &pairs, 1.0).unwrap();
            g.scalar_value(loss)
        };
        assert!(build(0.9) < build(0.5));
        assert!(build(0.5) < build(0.2));
    }

    #[test]
    fn batch_loss_equals_mean_of_per_example_losses() {
        let mut rng = stream_rng(31, "nce", 2);
        use rand::Rng;
        let n = 5;
        let d = 6;
        let h = Tensor::matrix(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let hp = Tensor::matrix(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();

        let mut g = Graph::new();
        let pairs = pairs_from(&mut g, h.clone(), hp.clone());
        let loss_node = info_nce_loss(&mut g, &pairs, 0.05).unwrap();
        let batch_loss = g.scalar_value(loss_node) as f64;

        // per-example: -log softmax of row i at i, same denominator over j
        let mut per_example_sum = 0.0f64;
        for i in 0..n {
            let mut g = Graph::new();
            let hn = g.var(h.clone());
            let hpn = g.var(hp.clone());
            let hn = g.rows_normalize(hn).unwrap();
            let hpn = g.rows_normalize(hpn).unwrap();
            let sims = g.matmul_nt(hn, hpn).unwrap();
            let logits = g.scale(sims, 1.0 / 0.05).unwrap();
            let row = g.gather_rows(logits, vec![i]).unwrap();
            let li = g.cross_entropy_rows(row, vec![i]).unwrap();
            per_example_sum += g.scalar_value(li) as f64;
        }
        let mean = per_example_sum / n as f64;
        assert!((batch_loss - mean).abs() < 1e-6, "{batch_loss} vs {mean}");
    }

    #[test]
    fn info_nce_gradient_passes_gradcheck() {
        let mut rng = stream_rng(37, "nce", 3);
        use rand::Rng;
        let h = Tensor::matrix(3, 8, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let hp = Tensor::matrix(3, 8, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let report = gradcheck(
            |g, vars| {
                let pairs = EmbeddingPairBatch { h: vars[0], h_plus: vars[1], n: 3 };
                info_nce_loss(g, &pairs, 0.05)
            },
            &[h, hp],
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn zero_norm_embedding_row_is_a_degenerate_input_error() {
        let mut g = Graph::new();
        let pairs = pairs_from(
            &mut g,
            Tensor::matrix(2, 3, vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap(),
            Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap(),
        );
        assert!(matches!(
            info_nce_loss(&mut g, &pairs, 0.05),
            Err(TensorError::DegenerateInput { .. })
        ));
    }

    #[test]
    fn dual_pass_behaviour_tracks_dropout_setting() {
        let corpus: Vec<String> = vec!["one two three four".into(), "five six seven".into()];
        let vocab = Vocab::build(&corpus, 32).unwrap();
        let mut cfg = EncoderConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 32,
            dropout_p: 0.1,
            max_seq_len: 8,
            vocab_size: 32,
        };
        let batch: Vec<TokenSeq> = corpus.iter().map(|s| encode(s, &vocab, cfg.max_seq_len)).collect();
        let mut store = ParamStore::new();
        let mut rng = stream_rng(2, "init", 0);
        let params = crate::encoder::init_params(&mut store, &cfg, "m", &mut rng).unwrap();

        let run = |cfg: &EncoderConfig, store: &ParamStore, params: &EncoderParams| {
            let mut g = Graph::new();
            let mut d1 = DropoutDraw::train(stream_rng(4, "drop1", 0));
            let mut d2 = DropoutDraw::train(stream_rng(4, "drop2", 0));
            let pairs = simcse_forward(&mut g, store, params, cfg, &batch, &mut d1, &mut d2).unwrap();
            (g.value(pairs.h).data().to_vec(), g.value(pairs.h_plus).data().to_vec())
        };

        let (h, hp) = run(&cfg, &store, &params);
        assert_ne!(h, hp, "independent draws must differ");
        assert!(degenerate_dropout_warning(&cfg).is_none());

        cfg.dropout_p = 0.0;
        let (h, hp) = run(&cfg, &store, &params);
        assert_eq!(h, hp, "no dropout means bit-identical passes");
        assert!(degenerate_dropout_warning(&cfg).is_some());

        // determinism across repeated runs
        cfg.dropout_p = 0.1;
        let a = run(&cfg, &store, &params);
        let b = run(&cfg, &store, &params);
        assert_eq!(a, b);
    }
}
