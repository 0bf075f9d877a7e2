use cmlmcse::encoder::EncoderConfig;
use cmlmcse::eval::synthetic_corpus;
use cmlmcse::text::{encode_corpus, Vocab};
use cmlmcse::trainer::*;
use std::time::Instant;

fn main() {
    for (p, batch) in [(16usize, 16usize), (16, 32), (32, 32), (24, 16)] {
        let corpus = synthetic_corpus(500, 1);
        let vocab = Vocab::build(&corpus, 4096).unwrap();
        let mut cfg = ModelConfig::default();
        cfg.encoder = EncoderConfig { d_model: 64, n_heads: 4, n_layers: 4, d_ff: 256, dropout_p: 0.1, max_seq_len: p, vocab_size: vocab.len() };
        cfg.data.seq_len = p;
        cfg.train.batch_size = batch;
        cfg.train.warmup_steps = 20;
        cfg.train.seed = 42;
        let seqs = encode_corpus(&corpus, &vocab, p);
        let t0 = Instant::now();
        let (pre, _) = warmup_pretrain(&cfg, &seqs).unwrap();
        let warmup_ms = t0.elapsed().as_millis() as f64 / 20.0;
        let mut state = build_model_state(pre).unwrap();
        let t1 = Instant::now();
        run_training(&mut state, &seqs, 20, LossMode::Full, AugmentMode::DropoutOnly, |_, _| {}).unwrap();
        let step_ms = t1.elapsed().as_millis() as f64 / 20.0;
        println!("p={p:2} batch={batch:2} V={}: warmup {warmup_ms:.1} ms/step, combined {step_ms:.1} ms/step", vocab.len());
    }
}
