use cmlmcse::encoder::{init_params, EncoderConfig};
use cmlmcse::eval::{eval_sts, generate_synthetic_sts, synthetic_corpus, strata_mean_cosines};
use cmlmcse::rng::stream_rng;
use cmlmcse::tensor::ParamStore;
use cmlmcse::text::Vocab;

fn main() {
    let corpus = synthetic_corpus(600, 7);
    let vocab = Vocab::build(&corpus, 4096).unwrap();
    let cfg = EncoderConfig {
        d_model: 64, n_heads: 4, n_layers: 4, d_ff: 256,
        dropout_p: 0.1, max_seq_len: 16, vocab_size: vocab.len(),
    };
    for seed in 0..5u64 {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(seed, "init-main", 0);
        let params = init_params(&mut store, &cfg, "m", &mut rng).unwrap();
        let pairs = generate_synthetic_sts(&corpus, 99, 150).unwrap();
        let rho = eval_sts(&store, &params, &cfg, &vocab, &pairs).unwrap();
        let strata = strata_mean_cosines(&store, &params, &cfg, &vocab, &pairs).unwrap();
        println!("seed {seed}: null rho = {rho:.4}, strata (gold, mean cos) = {strata:?}");
    }
}
