//! Spearman-correlation STS evaluation and the synthetic desk-scale STS
//! data it runs on.
//!
//! The synthetic benchmark has three strata with unambiguous gold order:
//! identical pairs (gold 5), light paraphrases via a bundled synonym table
//! or an adjacent word swap (gold 3.5), and unrelated pairs (gold 0.5).
//! Spearman only needs rank structure, so three levels are enough to score
//! whether a model separates them.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use std::path::Path;
use thiserror::Error;

use crate::encoder::{embed_sentences, EncoderConfig, EncoderParams};
use crate::rng::stream_rng;
use crate::tensor::{ParamStore, TensorError};
use crate::text::{encode, TextError, Vocab};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least 2 observations, got {0}")]
    TooFew(usize),
    #[error("spearman undefined: {0} input is constant")]
    ConstantInput(&'static str),
    #[error("empty pair list")]
    NoPairs,
    #[error("corpus too small: {got} sentences, need at least {need}")]
    CorpusTooSmall { got: usize, need: usize },
    #[error("gold score {0} outside [0, 5]")]
    GoldOutOfRange(f64),
    #[error("malformed STS line {line}: {detail}")]
    MalformedSts { line: usize, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

// ── Spearman ────────────────────────────────────────────────────────

/// Average (fractional) ranks, 1-based.
fn fractional_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite inputs"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // positions i..=j share the same value; average their ranks
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: fractional-rank ties, then Pearson on ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(EvalError::TooFew(xs.len().min(ys.len())));
    }
    if xs.iter().all(|&v| v == xs[0]) {
        return Err(EvalError::ConstantInput("first"));
    }
    if ys.iter().all(|&v| v == ys[0]) {
        return Err(EvalError::ConstantInput("second"));
    }
    let rx = fractional_ranks(xs);
    let ry = fractional_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    Ok(cov / (vx * vy).sqrt())
}

// ── STS pairs ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct StsPair {
    pub sentence_a: String,
    pub sentence_b: String,
    pub gold: f64,
}

impl StsPair {
    pub fn new(a: impl Into<String>, b: impl Into<String>, gold: f64) -> Result<Self> {
        if !(0.0..=5.0).contains(&gold) {
            return Err(EvalError::GoldOutOfRange(gold));
        }
        let (sentence_a, sentence_b) = (a.into(), b.into());
        if sentence_a.trim().is_empty() || sentence_b.trim().is_empty() {
            return Err(EvalError::MalformedSts { line: 0, detail: "empty sentence".into() });
        }
        Ok(Self { sentence_a, sentence_b, gold })
    }
}

/// UTF-8 TSV, three columns `sentence_a<TAB>sentence_b<TAB>gold`, no header.
pub fn read_sts_tsv(path: &Path) -> Result<Vec<StsPair>> {
    let content = std::fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(EvalError::MalformedSts {
                line: i + 1,
                detail: format!("{} columns, expected 3", cols.len()),
            });
        }
        let gold: f64 = cols[2].trim().parse().map_err(|e| EvalError::MalformedSts {
            line: i + 1,
            detail: format!("bad gold score: {e}"),
        })?;
        pairs.push(
            StsPair::new(cols[0], cols[1], gold).map_err(|e| EvalError::MalformedSts {
                line: i + 1,
                detail: e.to_string(),
            })?,
        );
    }
    if pairs.is_empty() {
        return Err(EvalError::NoPairs);
    }
    Ok(pairs)
}

pub fn write_sts_tsv(path: &Path, pairs: &[StsPair]) -> Result<()> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&format!("{}\t{}\t{}\n", p.sentence_a, p.sentence_b, p.gold));
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ── Model evaluation ────────────────────────────────────────────────

/// Cosine of two embedding rows in f64; bitwise-identical rows score
/// exactly 1.
fn cosine_f64(a: &[f32], b: &[f32]) -> f64 {
    if a == b {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Spearman correlation between eval-mode cosine scores and gold scores.
/// Deterministic: the model runs without dropout.
pub fn eval_sts(
    store: &ParamStore,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    vocab: &Vocab,
    pairs: &[StsPair],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(EvalError::NoPairs);
    }
    let mut scores = Vec::with_capacity(pairs.len());
    let golds: Vec<f64> = pairs.iter().map(|p| p.gold).collect();
    for chunk in pairs.chunks(64) {
        let batch_a: Vec<_> = chunk.iter().map(|p| encode(&p.sentence_a, vocab, cfg.max_seq_len)).collect();
        let batch_b: Vec<_> = chunk.iter().map(|p| encode(&p.sentence_b, vocab, cfg.max_seq_len)).collect();
        let ea = embed_sentences(store, params, cfg, &batch_a)?;
        let eb = embed_sentences(store, params, cfg, &batch_b)?;
        for i in 0..chunk.len() {
            scores.push(cosine_f64(ea.row(i), eb.row(i)));
        }
    }
    spearman(&scores, &golds)
}

/// Mean eval-mode cosine per gold level, ascending by gold. Used by the
/// strata-ordering checks.
pub fn strata_mean_cosines(
    store: &ParamStore,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    vocab: &Vocab,
    pairs: &[StsPair],
) -> Result<Vec<(f64, f64)>> {
    if pairs.is_empty() {
        return Err(EvalError::NoPairs);
    }
    let mut by_gold: std::collections::BTreeMap<u64, (f64, usize)> = Default::default();
    for chunk in pairs.chunks(64) {
        let batch_a: Vec<_> = chunk.iter().map(|p| encode(&p.sentence_a, vocab, cfg.max_seq_len)).collect();
        let batch_b: Vec<_> = chunk.iter().map(|p| encode(&p.sentence_b, vocab, cfg.max_seq_len)).collect();
        let ea = embed_sentences(store, params, cfg, &batch_a)?;
        let eb = embed_sentences(store, params, cfg, &batch_b)?;
        for (i, p) in chunk.iter().enumerate() {
            let e = by_gold.entry(p.gold.to_bits()).or_insert((0.0, 0));
            e.0 += cosine_f64(ea.row(i), eb.row(i));
            e.1 += 1;
        }
    }
    Ok(by_gold
        .into_iter()
        .map(|(bits, (sum, n))| (f64::from_bits(bits), sum / n as f64))
        .collect())
}

// ── Synthetic data ──────────────────────────────────────────────────

/// Synonym pairs over the toy-corpus word banks, usable in both directions.
pub const SYNONYMS: &[(&str, &str)] = &[
    ("quick", "fast"),
    ("big", "large"),
    ("small", "little"),
    ("happy", "glad"),
    ("quiet", "silent"),
    ("bright", "shiny"),
    ("old", "ancient"),
    ("cold", "chilly"),
    ("strange", "odd"),
    ("strong", "mighty"),
    ("tired", "weary"),
    ("clever", "smart"),
    ("gentle", "mild"),
    ("brave", "bold"),
    ("calm", "peaceful"),
    ("dark", "dim"),
    ("clean", "neat"),
    ("wet", "damp"),
    ("warm", "heated"),
    ("new", "fresh"),
    ("sad", "gloomy"),
    ("rich", "wealthy"),
    ("poor", "needy"),
    ("loud", "noisy"),
    ("tiny", "minute"),
    ("road", "street"),
    ("forest", "woods"),
    ("sea", "ocean"),
    ("house", "home"),
    ("stone", "rock"),
    ("ship", "boat"),
    ("hill", "mound"),
    ("meadow", "pasture"),
    ("cliff", "bluff"),
    ("lamp", "lantern"),
    ("walks", "strolls"),
    ("runs", "sprints"),
    ("watches", "observes"),
    ("finds", "discovers"),
    ("builds", "constructs"),
    ("carries", "hauls"),
    ("follows", "trails"),
    ("likes", "enjoys"),
    ("sees", "spots"),
    ("leaves", "departs"),
    ("guards", "protects"),
    ("paints", "decorates"),
    ("cleans", "scrubs"),
    ("repairs", "mends"),
    ("crosses", "traverses"),
];

const ADJECTIVES: &[&str] = &[
    "quick", "fast", "big", "large", "small", "little", "happy", "glad", "quiet", "silent",
    "bright", "shiny", "old", "ancient", "cold", "chilly", "strange", "odd", "strong", "mighty",
    "tired", "weary", "clever", "smart", "gentle", "mild", "brave", "bold", "calm", "peaceful",
    "dark", "dim", "clean", "neat", "wet", "damp", "warm", "heated", "new", "fresh", "sad",
    "gloomy", "rich", "wealthy", "poor", "needy", "loud", "noisy", "tiny", "minute",
];

const NOUNS: &[&str] = &[
    "cat", "dog", "bird", "fox", "horse", "rabbit", "farmer", "sailor", "teacher", "painter",
    "child", "doctor", "baker", "miner", "hunter", "garden", "river", "mountain", "village",
    "market", "harbor", "castle", "valley", "bridge", "tower", "island", "field", "road",
    "street", "forest", "woods", "sea", "ocean", "house", "home", "stone", "rock", "ship",
    "boat", "hill", "mound", "meadow", "pasture", "cliff", "bluff", "lamp", "lantern", "wall",
    "gate", "mill",
];

const VERBS: &[&str] = &[
    "walks", "strolls", "runs", "sprints", "watches", "observes", "finds", "discovers", "builds",
    "constructs", "carries", "hauls", "follows", "trails", "likes", "enjoys", "sees", "spots",
    "leaves", "departs", "guards", "protects", "paints", "decorates", "cleans", "scrubs",
    "repairs", "mends", "crosses", "traverses",
];

const PREPOSITIONS: &[&str] =
    &["near", "beside", "behind", "under", "above", "across", "along", "toward", "past", "around"];

const ADVERBS: &[&str] =
    &["slowly", "quietly", "often", "rarely", "carefully", "quickly", "daily", "gladly"];

/// Deterministic templated toy corpus; distinct sentences, 6 to 9 words.
pub fn synthetic_corpus(n_sentences: usize, seed: u64) -> Vec<String> {
    let mut rng = stream_rng(seed, "corpus", 0);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n_sentences);
    while out.len() < n_sentences {
        let adj1 = ADJECTIVES.choose(&mut rng).unwrap();
        let noun1 = NOUNS.choose(&mut rng).unwrap();
        let verb = VERBS.choose(&mut rng).unwrap();
        let prep = PREPOSITIONS.choose(&mut rng).unwrap();
        let adj2 = ADJECTIVES.choose(&mut rng).unwrap();
        let noun2 = NOUNS.choose(&mut rng).unwrap();
        let mut sentence = format!("the {adj1} {noun1} {verb} {prep} the {adj2} {noun2}");
        if rng.gen::<f32>() < 0.4 {
            let adv = ADVERBS.choose(&mut rng).unwrap();
            sentence.push(' ');
            sentence.push_str(adv);
        }
        if seen.insert(sentence.clone()) {
            out.push(sentence);
        }
    }
    out
}

fn synonym_of(word: &str) -> Option<&'static str> {
    for &(a, b) in SYNONYMS {
        if word == a {
            return Some(b);
        }
        if word == b {
            return Some(a);
        }
    }
    None
}

/// One-word synonym substitution when possible, else an adjacent word swap.
fn light_paraphrase(sentence: &str, rng: &mut ChaCha8Rng) -> String {
    let mut words: Vec<String> = sentence.split_whitespace().map(|w| w.to_string()).collect();
    let candidates: Vec<usize> =
        (0..words.len()).filter(|&i| synonym_of(&words[i]).is_some()).collect();
    if let Some(&i) = candidates.choose(rng) {
        words[i] = synonym_of(&words[i]).expect("candidate has a synonym").to_string();
    } else if words.len() >= 3 {
        let i = rng.gen_range(1..words.len() - 1);
        words.swap(i, i + 1);
    }
    words.join(" ")
}

/// Three equal strata: identical pairs (gold 5), light paraphrases
/// (gold 3.5), unrelated pairs (gold 0.5). Deterministic given the seed.
pub fn generate_synthetic_sts(corpus: &[String], seed: u64, n_pairs: usize) -> Result<Vec<StsPair>> {
    if corpus.len() < 50 {
        return Err(EvalError::CorpusTooSmall { got: corpus.len(), need: 50 });
    }
    let mut rng = stream_rng(seed, "sts", 0);
    let base = n_pairs / 3;
    let rem = n_pairs % 3;
    let sizes = [base + usize::from(rem > 0), base + usize::from(rem > 1), base];

    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..sizes[0] {
        let s = corpus.choose(&mut rng).unwrap();
        pairs.push(StsPair { sentence_a: s.clone(), sentence_b: s.clone(), gold: 5.0 });
    }
    for _ in 0..sizes[1] {
        let s = corpus.choose(&mut rng).unwrap();
        let para = light_paraphrase(s, &mut rng);
        pairs.push(StsPair { sentence_a: s.clone(), sentence_b: para, gold: 3.5 });
    }
    for _ in 0..sizes[2] {
        let a = corpus.choose(&mut rng).unwrap();
        let b = loop {
            let b = corpus.choose(&mut rng).unwrap();
            if b != a {
                break b;
            }
        };
        pairs.push(StsPair { sentence_a: a.clone(), sentence_b: b.clone(), gold: 0.5 });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    // O(n^2) independent restatement: fractional rank by counting, then
    // Pearson in f64.
    fn spearman_oracle(xs: &[f64], ys: &[f64]) -> f64 {
        let rank = |vals: &[f64]| -> Vec<f64> {
            vals.iter()
                .map(|&x| {
                    let less = vals.iter().filter(|&&y| y < x).count() as f64;
                    let equal = vals.iter().filter(|&&y| y == x).count() as f64;
                    less + (equal - 1.0) / 2.0 + 1.0
                })
                .collect()
        };
        let rx = rank(xs);
        let ry = rank(ys);
        let n = xs.len() as f64;
        let mx = rx.iter().sum::<f64>() / n;
        let my = ry.iter().sum::<f64>() / n;
        let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
        let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn identical_ranking_is_one_and_reversed_is_minus_one() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
    }

    #[test]
    fn gold_against_itself_is_exactly_one() {
        let xs = [0.5, 3.5, 5.0, 0.5, 3.5, 5.0, 1.0];
        assert_eq!(spearman(&xs, &xs).unwrap(), 1.0);
    }

    #[test]
    fn constant_inputs_are_an_error() {
        assert!(matches!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(EvalError::ConstantInput(_))));
        assert!(matches!(spearman(&[1.0, 2.0, 3.0], &[7.0, 7.0, 7.0]), Err(EvalError::ConstantInput(_))));
        assert!(matches!(spearman(&[1.0], &[1.0]), Err(EvalError::TooFew(1))));
    }

    #[test]
    fn random_tied_lists_match_the_quadratic_oracle() {
        use rand::Rng;
        for trial in 0..200u64 {
            let mut rng = stream_rng(51, "sp", trial);
            let n = 50;
            // coarse grid forces plenty of ties
            let xs: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..12) as f64) / 3.0).collect();
            let ys: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..9) as f64) - 4.0).collect();
            if xs.iter().all(|&v| v == xs[0]) || ys.iter().all(|&v| v == ys[0]) {
                continue;
            }
            let got = spearman(&xs, &ys).unwrap();
            let want = spearman_oracle(&xs, &ys);
            assert!((got - want).abs() < 1e-10, "trial {trial}: {got} vs {want}");
        }
    }

    #[test]
    fn invariant_under_strictly_monotone_transforms() {
        use rand::Rng;
        let mut rng = stream_rng(53, "mono", 0);
        let xs: Vec<f64> = (0..40).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let ys: Vec<f64> = (0..40).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let base = spearman(&xs, &ys).unwrap();
        let xs_exp: Vec<f64> = xs.iter().map(|&v| v.exp()).collect();
        let ys_affine: Vec<f64> = ys.iter().map(|&v| 2.5 * v + 7.0).collect();
        assert!((spearman(&xs_exp, &ys).unwrap() - base).abs() < 1e-10);
        assert!((spearman(&xs, &ys_affine).unwrap() - base).abs() < 1e-10);
        assert!((spearman(&xs_exp, &ys_affine).unwrap() - base).abs() < 1e-10);
    }

    #[test]
    fn synthetic_corpus_is_deterministic_and_distinct() {
        let a = synthetic_corpus(200, 3);
        let b = synthetic_corpus(200, 3);
        assert_eq!(a, b);
        let set: HashSet<_> = a.iter().collect();
        assert_eq!(set.len(), a.len());
        assert_ne!(a, synthetic_corpus(200, 4));
    }

    #[test]
    fn synthetic_sts_strata_shapes() {
        let corpus = synthetic_corpus(100, 9);
        let pairs = generate_synthetic_sts(&corpus, 1, 100).unwrap();
        assert_eq!(pairs.len(), 100);
        let count = |g: f64| pairs.iter().filter(|p| p.gold == g).count();
        let (i, p, r) = (count(5.0), count(3.5), count(0.5));
        assert!(i.abs_diff(p) <= 1 && p.abs_diff(r) <= 1, "{i}/{p}/{r}");
        for pair in &pairs {
            match pair.gold.to_bits() {
                b if b == 5.0f64.to_bits() => assert_eq!(pair.sentence_a, pair.sentence_b),
                b if b == 0.5f64.to_bits() => assert_ne!(pair.sentence_a, pair.sentence_b),
                _ => {
                    assert_ne!(pair.sentence_a, pair.sentence_b, "paraphrase must differ");
                    let wa: Vec<_> = pair.sentence_a.split_whitespace().collect();
                    let wb: Vec<_> = pair.sentence_b.split_whitespace().collect();
                    assert_eq!(wa.len(), wb.len(), "light paraphrase keeps length");
                }
            }
        }
        // determinism
        assert_eq!(pairs, generate_synthetic_sts(&corpus, 1, 100).unwrap());
        assert!(generate_synthetic_sts(&corpus[..10], 1, 30).is_err());
    }

    #[test]
    fn sts_tsv_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dev.tsv");
        let corpus = synthetic_corpus(60, 2);
        let pairs = generate_synthetic_sts(&corpus, 5, 30).unwrap();
        write_sts_tsv(&path, &pairs).unwrap();
        let loaded = read_sts_tsv(&path).unwrap();
        assert_eq!(pairs, loaded);

        std::fs::write(&path, "only two\tcolumns\n").unwrap();
        assert!(matches!(read_sts_tsv(&path), Err(EvalError::MalformedSts { line: 1, .. })));
        assert!(StsPair::new("a", "b", 6.0).is_err());
    }

    #[test]
    fn eval_sts_identical_pairs_score_exactly_one_and_order_is_irrelevant() {
        use crate::encoder::init_params;
        let corpus = synthetic_corpus(60, 21);
        let vocab = Vocab::build(&corpus, 512).unwrap();
        let cfg = EncoderConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 32,
            dropout_p: 0.1,
            max_seq_len: 12,
            vocab_size: vocab.len(),
        };
        let mut store = ParamStore::new();
        let mut rng = stream_rng(1, "init", 0);
        let params = init_params(&mut store, &cfg, "m", &mut rng).unwrap();
        let mut pairs = generate_synthetic_sts(&corpus, 3, 30).unwrap();

        // identical pairs: cosine must be exactly 1 even under random weights
        let identical: Vec<StsPair> =
            pairs.iter().filter(|p| p.gold == 5.0).cloned().collect();
        for p in &identical {
            let a = encode(&p.sentence_a, &vocab, cfg.max_seq_len);
            let ea = embed_sentences(&store, &params, &cfg, &[a.clone()]).unwrap();
            let eb = embed_sentences(&store, &params, &cfg, &[a]).unwrap();
            assert_eq!(cosine_f64(ea.row(0), eb.row(0)), 1.0);
        }

        let rho = eval_sts(&store, &params, &cfg, &vocab, &pairs).unwrap();
        let mut swapped = stream_rng(7, "shuffle", 0);
        pairs.shuffle(&mut swapped);
        let rho_shuffled = eval_sts(&store, &params, &cfg, &vocab, &pairs).unwrap();
        assert!((rho - rho_shuffled).abs() < 1e-12, "{rho} vs {rho_shuffled}");
        assert!((-1.0..=1.0).contains(&rho));
    }
}
