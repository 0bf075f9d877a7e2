//! The full gradient-checking suite: every graph primitive against central
//! differences at small dims, the two composite losses, and an end-to-end
//! one-block model with the combined objective.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::auxnet::{conditional_mlm_loss, fuse_and_predict, lexical_features};
use crate::contrastive::{info_nce_loss, EmbeddingPairBatch};
use crate::encoder::{
    init_blocks, init_mlm_head, init_params, pool_cls, split_extractor, DropoutDraw, EncoderConfig,
};
use crate::rng::stream_rng;
use crate::tensor::{gradcheck, gradcheck_eps, Graph, NodeId, ParamStore, Result, Tensor};
use crate::text::{encode, mask_tokens, Vocab};

pub const PRIMITIVE_TOL: f64 = 1e-3;
pub const END_TO_END_TOL: f64 = 5e-3;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn rng_for(name: &str, point: u64) -> ChaCha8Rng {
    stream_rng(0xC0FFEE, name, point)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("consistent shape")
}

fn check_op(
    name: &'static str,
    points: usize,
    mut make: impl FnMut(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>),
) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for point in 0..points {
        let mut rng = rng_for(name, point as u64);
        let (tensors, f) = make(&mut rng);
        // both comparison sides run in f64, so a smaller step than the
        // f32-oriented default trims truncation error without noise
        let report = gradcheck_eps(|g, vars| f(g, vars), &tensors, 1e-4)?;
        if report.max_rel_err > worst {
            worst = report.max_rel_err;
        }
    }
    Ok(CheckResult { name, max_rel_err: worst, tolerance: PRIMITIVE_TOL })
}

/// Scalarize any output so each op can be checked through a generic loss.
fn scalarize(g: &mut Graph, id: NodeId) -> Result<NodeId> {
    if g.value(id).len() == 1 {
        return Ok(id);
    }
    // weighted sum keeps the gradient signal non-uniform
    let n = g.value(id).len();
    let weights: Vec<f32> = (0..n).map(|i| 0.3 + (i % 7) as f32 * 0.21).collect();
    let shape = g.value(id).shape().to_vec();
    let w = g.constant(Tensor::new(shape, weights)?);
    let prod = g.mul(id, w)?;
    g.sum_all(prod)
}

/// Gradcheck every primitive at `points` random points, dims <= 8.
pub fn check_primitives(points: usize) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();

    out.push(check_op("add", points, |rng| {
        let a = rand_tensor(rng, vec![4, 6]);
        let b = rand_tensor(rng, vec![4, 6]);
        (vec![a, b], Box::new(|g, v| { let x = g.add(v[0], v[1])?; scalarize(g, x) }))
    })?);

    out.push(check_op("add_scaled", points, |rng| {
        let a = rand_tensor(rng, vec![3, 5]);
        let b = rand_tensor(rng, vec![3, 5]);
        (vec![a, b], Box::new(|g, v| { let x = g.add_scaled(v[0], v[1], 0.37)?; scalarize(g, x) }))
    })?);

    out.push(check_op("scale", points, |rng| {
        let a = rand_tensor(rng, vec![7]);
        (vec![a], Box::new(|g, v| { let x = g.scale(v[0], -1.7)?; scalarize(g, x) }))
    })?);

    out.push(check_op("mul", points, |rng| {
        let a = rand_tensor(rng, vec![2, 8]);
        let b = rand_tensor(rng, vec![2, 8]);
        (vec![a, b], Box::new(|g, v| { let x = g.mul(v[0], v[1])?; scalarize(g, x) }))
    })?);

    out.push(check_op("matmul", points, |rng| {
        let a = rand_tensor(rng, vec![4, 3]);
        let b = rand_tensor(rng, vec![3, 5]);
        (vec![a, b], Box::new(|g, v| { let x = g.matmul(v[0], v[1])?; scalarize(g, x) }))
    })?);

    out.push(check_op("matmul_nt", points, |rng| {
        let a = rand_tensor(rng, vec![4, 3]);
        let b = rand_tensor(rng, vec![5, 3]);
        (vec![a, b], Box::new(|g, v| { let x = g.matmul_nt(v[0], v[1])?; scalarize(g, x) }))
    })?);

    out.push(check_op("add_rows_cycled", points, |rng| {
        let a = rand_tensor(rng, vec![6, 4]);
        let b = rand_tensor(rng, vec![2, 4]);
        (vec![a, b], Box::new(|g, v| { let x = g.add_rows_cycled(v[0], v[1])?; scalarize(g, x) }))
    })?);

    out.push(check_op("gather_rows", points, |rng| {
        let a = rand_tensor(rng, vec![6, 3]);
        let ids: Vec<usize> = (0..8).map(|_| rng.gen_range(0..6)).collect();
        (vec![a], Box::new(move |g, v| { let x = g.gather_rows(v[0], ids.clone())?; scalarize(g, x) }))
    })?);

    out.push(check_op("take_row0", points, |rng| {
        let a = rand_tensor(rng, vec![8, 3]);
        (vec![a], Box::new(|g, v| { let x = g.take_row0(v[0], 4)?; scalarize(g, x) }))
    })?);

    out.push(check_op("splice_row0", points, |rng| {
        let base = rand_tensor(rng, vec![8, 3]);
        let rows = rand_tensor(rng, vec![2, 3]);
        (vec![base, rows], Box::new(|g, v| { let x = g.splice_row0(v[0], v[1], 4)?; scalarize(g, x) }))
    })?);

    out.push(check_op("gelu", points, |rng| {
        let a = rand_tensor(rng, vec![2, 7]);
        (vec![a], Box::new(|g, v| { let x = g.gelu(v[0])?; scalarize(g, x) }))
    })?);

    out.push(check_op("layer_norm", points, |rng| {
        let x = rand_tensor(rng, vec![4, 6]);
        let gain = rand_tensor(rng, vec![6]);
        let bias = rand_tensor(rng, vec![6]);
        (
            vec![x, gain, bias],
            Box::new(|g, v| { let x = g.layer_norm(v[0], v[1], v[2], 1e-9)?; scalarize(g, x) }),
        )
    })?);

    out.push(check_op("dropout", points, |rng| {
        let x = rand_tensor(rng, vec![3, 6]);
        let mask: Vec<f32> =
            (0..18).map(|_| if rng.gen::<f32>() < 0.2 { 0.0 } else { 1.25 }).collect();
        (vec![x], Box::new(move |g, v| { let x = g.dropout(v[0], mask.clone())?; scalarize(g, x) }))
    })?);

    out.push(check_op("attention", points, |rng| {
        // 2 sentences x 4 positions x d 8, 2 heads; one PAD per sentence
        let q = rand_tensor(rng, vec![8, 8]);
        let k = rand_tensor(rng, vec![8, 8]);
        let v = rand_tensor(rng, vec![8, 8]);
        let valid = vec![true, true, true, false, true, true, false, false];
        let drop: Vec<f32> =
            (0..2 * 2 * 16).map(|_| if rng.gen::<f32>() < 0.15 { 0.0 } else { 1.0 / 0.85 }).collect();
        (
            vec![q, k, v],
            Box::new(move |g, vars| {
                let x = g.attention(vars[0], vars[1], vars[2], 2, 4, &valid, Some(drop.clone()))?;
                scalarize(g, x)
            }),
        )
    })?);

    out.push(check_op("cross_entropy_rows", points, |rng| {
        let logits = rand_tensor(rng, vec![4, 7]);
        let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..7)).collect();
        (vec![logits], Box::new(move |g, v| g.cross_entropy_rows(v[0], targets.clone())))
    })?);

    out.push(check_op("rows_normalize", points, |rng| {
        let x = rand_tensor(rng, vec![3, 8]);
        (vec![x], Box::new(|g, v| { let x = g.rows_normalize(v[0])?; scalarize(g, x) }))
    })?);

    out.push(check_op("cosine_sim", points, |rng| {
        let a = rand_tensor(rng, vec![8]);
        let b = rand_tensor(rng, vec![8]);
        (vec![a, b], Box::new(|g, v| g.cosine_sim(v[0], v[1])))
    })?);

    out.push(check_op("mean_all", points, |rng| {
        let a = rand_tensor(rng, vec![2, 4]);
        (vec![a], Box::new(|g, v| g.mean_all(v[0])))
    })?);

    out.push(check_op("sum_all", points, |rng| {
        let a = rand_tensor(rng, vec![5]);
        (vec![a], Box::new(|g, v| g.sum_all(v[0])))
    })?);

    Ok(out)
}

/// The two composite losses at reduced dims.
pub fn check_losses() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();

    out.push(check_op("info_nce_loss", 10, |rng| {
        let h = rand_tensor(rng, vec![3, 8]);
        let hp = rand_tensor(rng, vec![3, 8]);
        (
            vec![h, hp],
            Box::new(|g, v| {
                let pairs = EmbeddingPairBatch { h: v[0], h_plus: v[1], n: 3 };
                info_nce_loss(g, &pairs, 0.05)
            }),
        )
    })?);

    // conditional MLM loss w.r.t. the sentence embedding (the conditional
    // channel itself)
    let fixture = e2e_fixture();
    let feats = lexical_features(
        &fixture.store,
        &fixture.extractor,
        &fixture.cfg.with_layers(1),
        &fixture.masked,
        &DropoutDraw::eval(),
    )?;
    let mut rng = rng_for("cmlm_h", 0);
    let h0 = rand_tensor(&mut rng, vec![fixture.masked.len(), fixture.cfg.d_model]);
    let report = gradcheck(
        |g, vars| {
            let mut draw = DropoutDraw::eval();
            let logits = fuse_and_predict(
                g,
                &fixture.store,
                &fixture.fusioner,
                &fixture.head,
                &fixture.cfg,
                vars[0],
                &feats,
                &fixture.masked,
                &mut draw,
            )?;
            conditional_mlm_loss(g, logits, &fixture.masked, fixture.cfg.max_seq_len)
        },
        &[h0],
    )?;
    out.push(CheckResult {
        name: "conditional_mlm_loss_wrt_h",
        max_rel_err: report.max_rel_err,
        tolerance: PRIMITIVE_TOL,
    });

    Ok(out)
}

struct E2eFixture {
    store: ParamStore,
    main: crate::encoder::EncoderParams,
    extractor: crate::encoder::EncoderParams,
    fusioner: Vec<crate::encoder::BlockParams>,
    head: crate::encoder::MlmHead,
    cfg: EncoderConfig,
    batch: Vec<crate::text::TokenSeq>,
    masked: Vec<crate::text::MaskedSeq>,
}

fn e2e_fixture() -> E2eFixture {
    let cfg = EncoderConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 16,
        dropout_p: 0.0,
        max_seq_len: 6,
        vocab_size: 16,
    };
    let corpus: Vec<String> = vec!["a b c d".into(), "e f g".into()];
    let vocab = Vocab::build(&corpus, cfg.vocab_size).expect("non-empty corpus");
    let batch: Vec<_> = corpus.iter().map(|s| encode(s, &vocab, cfg.max_seq_len)).collect();
    let masked: Vec<_> = batch
        .iter()
        .enumerate()
        .map(|(i, s)| mask_tokens(s, 0.5, &mut rng_for("e2e_mask", i as u64)).expect("maskable"))
        .collect();
    let mut store = ParamStore::new();
    let mut rng = rng_for("e2e_init", 0);
    let main = init_params(&mut store, &cfg, "main", &mut rng).expect("valid config");
    let extractor = split_extractor(&mut store, &main, cfg.n_layers, 1, "ext").expect("k in range");
    let fusioner = init_blocks(&mut store, &cfg, 1, "fus", &mut rng);
    let head = init_mlm_head(&mut store, &cfg, "head", &mut rng);
    E2eFixture { store, main, extractor, fusioner, head, cfg, batch, masked }
}

/// One-block model, combined loss, gradient w.r.t. every trainable
/// parameter via var substitution.
pub fn check_end_to_end() -> Result<CheckResult> {
    let f = e2e_fixture();
    let feats =
        lexical_features(&f.store, &f.extractor, &f.cfg.with_layers(1), &f.masked, &DropoutDraw::eval())?;

    // trainable params become gradcheck vars, bound back into a scratch
    // store inside the builder
    let trainable: Vec<_> = f.store.ids().filter(|&id| !f.store.is_frozen(id)).collect();
    let points: Vec<Tensor> = trainable.iter().map(|&id| f.store.value(id).clone()).collect();

    let report = gradcheck(
        |g, vars| build_combined_loss(g, &f, &feats, vars, &trainable),
        &points,
    )?;
    Ok(CheckResult {
        name: "one_block_end_to_end",
        max_rel_err: report.max_rel_err,
        tolerance: END_TO_END_TOL,
    })
}

/// Forward of the combined objective where every trainable parameter is a
/// var node. Mirrors the training graph: two encoder passes (dropout off),
/// InfoNCE, frozen lexical features, fusion, conditional MLM, weighted sum.
fn build_combined_loss(
    g: &mut Graph,
    f: &E2eFixture,
    feats: &crate::auxnet::LexicalFeatures,
    vars: &[NodeId],
    trainable: &[crate::tensor::ParamId],
) -> Result<NodeId> {
    use std::collections::HashMap;
    let by_id: HashMap<usize, NodeId> =
        trainable.iter().enumerate().map(|(i, id)| (id.index(), vars[i])).collect();
    let node = |id: crate::tensor::ParamId| by_id[&id.index()];

    // manual encoder forward with var-bound parameters
    let (ids, valid) = crate::encoder::batch_layout(&f.batch, f.cfg.max_seq_len)?;
    let run_encoder = |g: &mut Graph| -> Result<NodeId> {
        let emb = g.gather_rows(node(f.main.tok_emb), ids.clone())?;
        let mut x = g.add_rows_cycled(emb, node(f.main.pos_emb))?;
        for bp in &f.main.blocks {
            let q = {
                let xw = g.matmul(x, node(bp.wq))?;
                g.add_rows_cycled(xw, node(bp.bq))?
            };
            let k = {
                let xw = g.matmul(x, node(bp.wk))?;
                g.add_rows_cycled(xw, node(bp.bk))?
            };
            let v = {
                let xw = g.matmul(x, node(bp.wv))?;
                g.add_rows_cycled(xw, node(bp.bv))?
            };
            let att = g.attention(q, k, v, f.cfg.n_heads, f.cfg.max_seq_len, &valid, None)?;
            let att_o = {
                let xw = g.matmul(att, node(bp.wo))?;
                g.add_rows_cycled(xw, node(bp.bo))?
            };
            let res1 = g.add(x, att_o)?;
            let h1 = g.layer_norm(res1, node(bp.ln1_g), node(bp.ln1_b), crate::encoder::LN_EPS)?;
            let f1 = {
                let xw = g.matmul(h1, node(bp.w1))?;
                g.add_rows_cycled(xw, node(bp.b1))?
            };
            let f1a = g.gelu(f1)?;
            let ffn = {
                let xw = g.matmul(f1a, node(bp.w2))?;
                g.add_rows_cycled(xw, node(bp.b2))?
            };
            let res2 = g.add(h1, ffn)?;
            x = g.layer_norm(res2, node(bp.ln2_g), node(bp.ln2_b), crate::encoder::LN_EPS)?;
        }
        Ok(x)
    };

    // dropout is off at this scale, so the "two passes" coincide; the
    // contrastive term still exercises the full similarity graph
    let hidden1 = run_encoder(g)?;
    let hidden2 = run_encoder(g)?;
    let h = pool_cls(g, hidden1, f.cfg.max_seq_len)?;
    let h_plus = pool_cls(g, hidden2, f.cfg.max_seq_len)?;
    let pairs = EmbeddingPairBatch { h, h_plus, n: f.batch.len() };
    let l_contrast = info_nce_loss(g, &pairs, 0.05)?;

    let hp = g.constant(feats.hidden.clone());
    let fused = g.splice_row0(hp, h, f.cfg.max_seq_len)?;
    let (_, valid_masked) =
        crate::encoder::batch_layout(&crate::auxnet::masked_to_batch(&f.masked), f.cfg.max_seq_len)?;
    let mut x = fused;
    for bp in &f.fusioner {
        let q = {
            let xw = g.matmul(x, node(bp.wq))?;
            g.add_rows_cycled(xw, node(bp.bq))?
        };
        let k = {
            let xw = g.matmul(x, node(bp.wk))?;
            g.add_rows_cycled(xw, node(bp.bk))?
        };
        let v = {
            let xw = g.matmul(x, node(bp.wv))?;
            g.add_rows_cycled(xw, node(bp.bv))?
        };
        let att = g.attention(q, k, v, f.cfg.n_heads, f.cfg.max_seq_len, &valid_masked, None)?;
        let att_o = {
            let xw = g.matmul(att, node(bp.wo))?;
            g.add_rows_cycled(xw, node(bp.bo))?
        };
        let res1 = g.add(x, att_o)?;
        let h1 = g.layer_norm(res1, node(bp.ln1_g), node(bp.ln1_b), crate::encoder::LN_EPS)?;
        let f1 = {
            let xw = g.matmul(h1, node(bp.w1))?;
            g.add_rows_cycled(xw, node(bp.b1))?
        };
        let f1a = g.gelu(f1)?;
        let ffn = {
            let xw = g.matmul(f1a, node(bp.w2))?;
            g.add_rows_cycled(xw, node(bp.b2))?
        };
        let res2 = g.add(h1, ffn)?;
        x = g.layer_norm(res2, node(bp.ln2_g), node(bp.ln2_b), crate::encoder::LN_EPS)?;
    }
    let logits_all = {
        let xw = g.matmul(x, node(f.head.w))?;
        g.add_rows_cycled(xw, node(f.head.b))?
    };
    let l_mlm = conditional_mlm_loss(g, logits_all, &f.masked, f.cfg.max_seq_len)?;
    g.add_scaled(l_contrast, l_mlm, 0.005)
}

/// The f32 training backward against its f64 mirror on the full combined
/// graph: transcription divergence between the two rule sets shows up here
/// even where finite differences would be noise-limited.
pub fn check_precision_consistency() -> Result<CheckResult> {
    let f = e2e_fixture();
    let feats =
        lexical_features(&f.store, &f.extractor, &f.cfg.with_layers(1), &f.masked, &DropoutDraw::eval())?;
    let trainable: Vec<_> = f.store.ids().filter(|&id| !f.store.is_frozen(id)).collect();
    let points: Vec<Tensor> = trainable.iter().map(|&id| f.store.value(id).clone()).collect();

    let mut g = Graph::new();
    let vars: Vec<NodeId> = points.iter().map(|t| g.var(t.clone())).collect();
    let loss = build_combined_loss(&mut g, &f, &feats, &vars, &trainable)?;
    g.backward_nodes(loss)?;
    let f64_grads = g.grads_f64(loss)?;

    let mut worst = 0.0f64;
    for &var in &vars {
        let a32 = g.grad(var).expect("trainable leaf got gradient");
        let a64 = f64_grads[var].as_ref().expect("f64 sweep covered leaf");
        for (&x32, &x64) in a32.iter().zip(a64) {
            let rel = (x32 as f64 - x64).abs() / x64.abs().max(1e-3);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(CheckResult { name: "f32_vs_f64_backward", max_rel_err: worst, tolerance: 1e-3 })
}

/// Primitives + losses + precision consistency + end-to-end.
pub fn run_all(points_per_primitive: usize) -> Result<Vec<CheckResult>> {
    let mut out = check_primitives(points_per_primitive)?;
    out.extend(check_losses()?);
    out.push(check_precision_consistency()?);
    out.push(check_end_to_end()?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass_at_100_random_points() {
        for r in check_primitives(100).unwrap() {
            assert!(r.passed(), "{}: {} >= {}", r.name, r.max_rel_err, r.tolerance);
        }
    }

    #[test]
    fn losses_and_end_to_end_pass() {
        for r in check_losses().unwrap() {
            assert!(r.passed(), "{}: {} >= {}", r.name, r.max_rel_err, r.tolerance);
        }
        let e2e = check_end_to_end().unwrap();
        assert!(e2e.passed(), "e2e: {}", e2e.max_rel_err);
        assert!(e2e.max_rel_err < END_TO_END_TOL);
    }

    #[test]
    fn every_check_appears_exactly_once() {
        let all = run_all(2).unwrap();
        let mut names: Vec<_> = all.iter().map(|r| r.name).collect();
        let total = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), total);
    }

    #[test]
    fn a_corrupted_backward_rule_is_caught() {
        // the test-only op doubles on forward but claims a factor of 3 in
        // its backward rule; the checker must flag the mismatch
        let x = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let report = gradcheck(
            |g, vars| {
                let y = g.broken_scale(vars[0])?;
                g.sum_all(y)
            },
            &[x],
        )
        .unwrap();
        assert!(report.max_rel_err > 0.3, "negative control failed to fail: {}", report.max_rel_err);
    }
}
