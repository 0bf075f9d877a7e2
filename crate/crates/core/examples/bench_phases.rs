use cmlmcse::contrastive::{info_nce_loss, simcse_forward};
use cmlmcse::auxnet::{conditional_mlm_loss, fuse_and_predict, lexical_features};
use cmlmcse::encoder::{DropoutDraw, EncoderConfig};
use cmlmcse::eval::synthetic_corpus;
use cmlmcse::rng::stream_rng;
use cmlmcse::tensor::Graph;
use cmlmcse::text::{encode_corpus, mask_tokens, Vocab};
use cmlmcse::trainer::*;
use std::time::Instant;

fn main() {
    let corpus = synthetic_corpus(500, 1);
    let vocab = Vocab::build(&corpus, 4096).unwrap();
    let p = 16usize;
    let mut cfg = ModelConfig::default();
    cfg.encoder = EncoderConfig { d_model: 64, n_heads: 4, n_layers: 4, d_ff: 256, dropout_p: 0.1, max_seq_len: p, vocab_size: vocab.len() };
    cfg.data.seq_len = p;
    cfg.train.batch_size = 16;
    cfg.train.warmup_steps = 2;
    cfg.train.seed = 42;
    let seqs = encode_corpus(&corpus, &vocab, p);
    let (pre, _) = warmup_pretrain(&cfg, &seqs).unwrap();
    let mut state = build_model_state(pre).unwrap();

    let batch: Vec<_> = seqs[..16].to_vec();
    let reps = 30;

    // forward contrastive
    let t = Instant::now();
    for i in 0..reps {
        let mut g = Graph::new();
        let mut d1 = DropoutDraw::train(stream_rng(1, "a", i));
        let mut d2 = DropoutDraw::train(stream_rng(1, "b", i));
        let pairs = simcse_forward(&mut g, &state.store, &state.main, &cfg.encoder, &batch, &mut d1, &mut d2).unwrap();
        let _ = info_nce_loss(&mut g, &pairs, 0.05).unwrap();
    }
    println!("contrastive fwd (2 passes):      {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    // extractor eval
    let masked: Vec<_> = batch.iter().map(|s| mask_tokens(s, 0.15, &mut stream_rng(2, "m", 0)).unwrap()).collect();
    let ext_cfg = cfg.encoder.with_layers(3);
    let t = Instant::now();
    for _ in 0..reps {
        let _ = lexical_features(&state.store, &state.extractor, &ext_cfg, &masked, &DropoutDraw::eval()).unwrap();
    }
    println!("extractor eval fwd (3 blocks):   {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    // full step split: fwd vs bwd vs adam
    let feats = lexical_features(&state.store, &state.extractor, &ext_cfg, &masked, &DropoutDraw::eval()).unwrap();
    let mut fwd_ms = 0.0; let mut bwd_ms = 0.0; let mut adam_ms = 0.0;
    for i in 0..reps {
        let t = Instant::now();
        let mut g = Graph::new();
        let mut d1 = DropoutDraw::train(stream_rng(1, "a", i as u64));
        let mut d2 = DropoutDraw::train(stream_rng(1, "b", i as u64));
        let pairs = simcse_forward(&mut g, &state.store, &state.main, &cfg.encoder, &batch, &mut d1, &mut d2).unwrap();
        let lc = info_nce_loss(&mut g, &pairs, 0.05).unwrap();
        let mut fd = DropoutDraw::train(stream_rng(1, "f", i as u64));
        let logits = fuse_and_predict(&mut g, &state.store, &state.fusioner, &state.head, &cfg.encoder, pairs.h, &feats, &masked, &mut fd).unwrap();
        let lm = conditional_mlm_loss(&mut g, logits, &masked, p).unwrap();
        let total = g.add_scaled(lc, lm, 0.005).unwrap();
        fwd_ms += t.elapsed().as_secs_f64() * 1000.0;
        let t = Instant::now();
        g.backward(total, &mut state.store).unwrap();
        bwd_ms += t.elapsed().as_secs_f64() * 1000.0;
        let t = Instant::now();
        state.adam.step(&mut state.store, &cfg.train);
        state.store.zero_grads();
        adam_ms += t.elapsed().as_secs_f64() * 1000.0;
    }
    println!("full fwd: {:.1} ms | bwd: {:.1} ms | adam+zero: {:.1} ms", fwd_ms / reps as f64, bwd_ms / reps as f64, adam_ms / reps as f64);
}
