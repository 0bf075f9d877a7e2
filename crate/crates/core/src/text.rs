//! Corpus ingestion, word-level vocabulary, fixed-length encoding, random
//! masking for the conditional MLM task, and the two contrastive-side
//! augmentations (word repetition, drop-one-word).
//!
//! Tokenization is deliberately plain: lowercase, split on anything that is
//! not alphanumeric. The mechanism under test is the loss structure, not
//! subword modeling, so there is no WordPiece and no 80/10/10 mask mixing —
//! a masked position always holds the literal `[MASK]` token.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const MASK_ID: u32 = 3;
pub const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[MASK]"];

#[derive(Debug, Error)]
pub enum TextError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("sequence has no maskable position (true_length {0} < 2)")]
    Unmaskable(usize),
    #[error("sequence too short to drop a word (true_length {0} < 3)")]
    Undroppable(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed vocab file: {0}")]
    MalformedVocab(String),
}

pub type Result<T> = std::result::Result<T, TextError>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DataConfig {
    /// Fixed sequence length, position 0 being [CLS].
    pub seq_len: usize,
    pub mask_rate: f32,
    pub max_vocab: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { seq_len: 32, mask_rate: 0.15, max_vocab: 4096, seed: 0 }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 4 {
            return Err(TextError::InvalidConfig(format!("seq_len {} < 4", self.seq_len)));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate <= 1.0) {
            return Err(TextError::InvalidConfig(format!("mask_rate {} not in (0, 1]", self.mask_rate)));
        }
        if self.max_vocab <= RESERVED.len() {
            return Err(TextError::InvalidConfig(format!("max_vocab {} too small", self.max_vocab)));
        }
        Ok(())
    }
}

/// Token-to-id map with fixed reserved ids and contiguous assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Most frequent `max_vocab - 4` tokens of the corpus, frequency ties
    /// broken lexicographically so two builds of the same corpus are
    /// byte-identical.
    pub fn build(corpus: &[String], max_vocab: usize) -> Result<Self> {
        if corpus.is_empty() || corpus.iter().all(|s| tokenize(s).is_empty()) {
            return Err(TextError::EmptyCorpus);
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for line in corpus {
            for tok in tokenize(line) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_vocab.saturating_sub(RESERVED.len()));

        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(ranked.into_iter().map(|(t, _)| t));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Self { token_to_id, id_to_token })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    /// One token per line, line number = id.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for t in &self.id_to_token {
            let _ = writeln!(out, "{t}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = std::fs::read_to_string(path)?;
        let id_to_token: Vec<String> = content.lines().map(|l| l.to_string()).collect();
        if id_to_token.len() < RESERVED.len() {
            return Err(TextError::MalformedVocab("fewer lines than reserved tokens".into()));
        }
        for (i, expected) in RESERVED.iter().enumerate() {
            if id_to_token[i] != *expected {
                return Err(TextError::MalformedVocab(format!(
                    "line {i} is {:?}, expected {expected:?}",
                    id_to_token[i]
                )));
            }
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Self { token_to_id, id_to_token })
    }
}

/// Lowercased word tokens; punctuation and whitespace both split.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(|s| s.to_string())
        .collect()
}

/// One sentence per line.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let content = std::fs::read_to_string(path)?;
    let lines: Vec<String> = content
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    if lines.is_empty() {
        return Err(TextError::EmptyCorpus);
    }
    Ok(lines)
}

/// Fixed-length id sequence: `[CLS]` then content tokens then `[PAD]`s.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub true_length: usize,
}

impl TokenSeq {
    pub fn content_len(&self) -> usize {
        self.true_length - 1
    }

    /// Positions eligible for masking/augmentation: 1..true_length.
    pub fn content_positions(&self) -> std::ops::Range<usize> {
        1..self.true_length
    }
}

pub fn encode(sentence: &str, vocab: &Vocab, seq_len: usize) -> TokenSeq {
    let tokens = tokenize(sentence);
    encode_tokens(&tokens, vocab, seq_len)
}

fn encode_tokens(tokens: &[String], vocab: &Vocab, seq_len: usize) -> TokenSeq {
    let content = tokens.len().min(seq_len - 1);
    let mut ids = Vec::with_capacity(seq_len);
    ids.push(CLS_ID);
    ids.extend(tokens[..content].iter().map(|t| vocab.id(t)));
    ids.resize(seq_len, PAD_ID);
    TokenSeq { ids, true_length: 1 + content }
}

/// Content tokens back to strings (CLS and PAD dropped).
pub fn decode(seq: &TokenSeq, vocab: &Vocab) -> Vec<String> {
    seq.ids[1..seq.true_length].iter().map(|&id| vocab.token(id).to_string()).collect()
}

/// A `TokenSeq` with some content positions replaced by `[MASK]`, plus the
/// original token at each masked position.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSeq {
    pub ids: Vec<u32>,
    pub true_length: usize,
    /// Sorted; never contains 0 or PAD positions.
    pub mask_positions: Vec<usize>,
    pub targets: Vec<u32>,
}

impl MaskedSeq {
    pub fn as_token_seq(&self) -> TokenSeq {
        TokenSeq { ids: self.ids.clone(), true_length: self.true_length }
    }
}

/// Independently mask each content position with probability `mask_rate`;
/// if nothing got selected, mask one uniformly-random content position so
/// the MLM loss is defined for every sentence.
pub fn mask_tokens(seq: &TokenSeq, mask_rate: f32, rng: &mut impl Rng) -> Result<MaskedSeq> {
    if seq.true_length < 2 {
        return Err(TextError::Unmaskable(seq.true_length));
    }
    let mut ids = seq.ids.clone();
    let mut mask_positions = Vec::new();
    let mut targets = Vec::new();
    for pos in seq.content_positions() {
        if rng.gen::<f32>() < mask_rate {
            mask_positions.push(pos);
            targets.push(ids[pos]);
            ids[pos] = MASK_ID;
        }
    }
    if mask_positions.is_empty() {
        let pos = rng.gen_range(1..seq.true_length);
        mask_positions.push(pos);
        targets.push(ids[pos]);
        ids[pos] = MASK_ID;
    }
    Ok(MaskedSeq { ids, true_length: seq.true_length, mask_positions, targets })
}

/// Duplicate `ceil(repeat_fraction * content_len)` uniformly-chosen content
/// tokens in place, then re-fit to the fixed length.
pub fn augment_word_repetition(
    seq: &TokenSeq,
    repeat_fraction: f32,
    rng: &mut impl Rng,
) -> Result<TokenSeq> {
    if seq.true_length < 2 {
        return Err(TextError::Unmaskable(seq.true_length));
    }
    let content: Vec<u32> = seq.ids[1..seq.true_length].to_vec();
    let n_rep = (repeat_fraction as f64 * content.len() as f64).ceil() as usize;
    let n_rep = n_rep.min(content.len());
    let mut chosen: Vec<usize> = rand::seq::index::sample(rng, content.len(), n_rep).into_vec();
    chosen.sort_unstable();
    let mut out: Vec<u32> = Vec::with_capacity(content.len() + n_rep);
    let mut next = chosen.iter().peekable();
    for (i, &tok) in content.iter().enumerate() {
        out.push(tok);
        if next.peek() == Some(&&i) {
            out.push(tok);
            next.next();
        }
    }
    Ok(refit(out, seq.ids.len()))
}

/// Remove exactly one uniformly-chosen content token. Requires at least
/// three content tokens so the result keeps a usable sentence.
pub fn augment_drop_one_word(seq: &TokenSeq, rng: &mut impl Rng) -> Result<TokenSeq> {
    if seq.content_len() < 3 {
        return Err(TextError::Undroppable(seq.true_length));
    }
    let mut content: Vec<u32> = seq.ids[1..seq.true_length].to_vec();
    let victim = rng.gen_range(0..content.len());
    content.remove(victim);
    Ok(refit(content, seq.ids.len()))
}

fn refit(content: Vec<u32>, seq_len: usize) -> TokenSeq {
    let keep = content.len().min(seq_len - 1);
    let mut ids = Vec::with_capacity(seq_len);
    ids.push(CLS_ID);
    ids.extend_from_slice(&content[..keep]);
    ids.resize(seq_len, PAD_ID);
    TokenSeq { ids, true_length: 1 + keep }
}

/// Encode a whole corpus, skipping sentences with no content tokens.
pub fn encode_corpus(corpus: &[String], vocab: &Vocab, seq_len: usize) -> Vec<TokenSeq> {
    corpus
        .iter()
        .map(|s| encode(s, vocab, seq_len))
        .filter(|t| t.true_length >= 2)
        .collect()
}

/// Distinct batch indices drawn from the caller's stream.
pub fn sample_indices(rng: &mut impl Rng, population: usize, n: usize) -> Vec<usize> {
    let n = n.min(population);
    let mut all: Vec<usize> = (0..population).collect();
    all.partial_shuffle(rng, n);
    all.truncate(n);
    all
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn corpus(lines: &[&str]) -> Vec<String> {
        lines.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn build_vocab_keeps_seen_tokens() {
        let v = Vocab::build(&corpus(&["a b a"]), 6).unwrap();
        assert_eq!(v.len(), 6);
        assert!(v.contains("a"));
        assert!(v.contains("b"));
    }

    #[test]
    fn build_vocab_caps_to_most_frequent() {
        // 10 distinct words, frequencies 10..1; cap 8 keeps the 4 most frequent.
        let mut lines = Vec::new();
        for (i, w) in ["w0", "w1", "w2", "w3", "w4", "w5", "w6", "w7", "w8", "w9"].iter().enumerate() {
            for _ in 0..(10 - i) {
                lines.push(w.to_string());
            }
        }
        let v = Vocab::build(&lines, 8).unwrap();
        assert_eq!(v.len(), 8);
        for kept in ["w0", "w1", "w2", "w3"] {
            assert!(v.contains(kept), "{kept} missing");
        }
        assert_eq!(v.id("w7"), UNK_ID);
    }

    #[test]
    fn vocab_ties_break_identically_across_builds() {
        let lines = corpus(&["zeta alpha mu", "mu alpha zeta", "kappa beta"]);
        let a = Vocab::build(&lines, 6).unwrap();
        let b = Vocab::build(&lines, 6).unwrap();
        assert_eq!(a.to_file_string(), b.to_file_string());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(Vocab::build(&[], 10), Err(TextError::EmptyCorpus)));
        assert!(matches!(Vocab::build(&corpus(&["  ", "..."]), 10), Err(TextError::EmptyCorpus)));
    }

    #[test]
    fn encode_layout_cls_content_pad() {
        let v = Vocab::build(&corpus(&["hello world"]), 10).unwrap();
        let seq = encode("hello world", &v, 5);
        assert_eq!(seq.ids[0], CLS_ID);
        assert_eq!(seq.ids[1], v.id("hello"));
        assert_eq!(seq.ids[2], v.id("world"));
        assert_eq!(&seq.ids[3..], &[PAD_ID, PAD_ID]);
        assert_eq!(seq.true_length, 3);
    }

    #[test]
    fn encode_oov_becomes_unk_and_long_input_truncates() {
        let v = Vocab::build(&corpus(&["a b"]), 6).unwrap();
        let seq = encode("a mystery b", &v, 8);
        assert_eq!(seq.ids[2], UNK_ID);

        let long = encode("a b a b a b a b a b a", &v, 5);
        assert_eq!(long.ids.len(), 5);
        assert_eq!(long.true_length, 5);
    }

    #[test]
    fn encode_empty_sentence_is_cls_plus_pad() {
        let v = Vocab::build(&corpus(&["a"]), 5).unwrap();
        let seq = encode("", &v, 4);
        assert_eq!(seq.true_length, 1);
        assert_eq!(seq.ids, vec![CLS_ID, PAD_ID, PAD_ID, PAD_ID]);
    }

    #[test]
    fn decode_of_encode_is_identity_for_in_vocab_sentences() {
        let v = Vocab::build(&corpus(&["the cat sat on the mat"]), 32).unwrap();
        let seq = encode("The cat sat, on the MAT", &v, 16);
        assert_eq!(decode(&seq, &v), vec!["the", "cat", "sat", "on", "the", "mat"]);
    }

    #[test]
    fn mask_rate_one_masks_all_content_and_nothing_else() {
        let v = Vocab::build(&corpus(&["a b c d"]), 10).unwrap();
        let seq = encode("a b c d", &v, 8);
        let mut rng = stream_rng(1, "t", 0);
        let m = mask_tokens(&seq, 1.0, &mut rng).unwrap();
        assert_eq!(m.mask_positions, vec![1, 2, 3, 4]);
        assert_eq!(m.ids[0], CLS_ID);
        assert!(m.ids[1..5].iter().all(|&i| i == MASK_ID));
        assert!(m.ids[5..].iter().all(|&i| i == PAD_ID));
        assert_eq!(m.targets, seq.ids[1..5].to_vec());
    }

    #[test]
    fn floor_of_one_rule_masks_exactly_one_at_tiny_rate() {
        let v = Vocab::build(&corpus(&["a b c d e"]), 12).unwrap();
        let seq = encode("a b c d e", &v, 8);
        for step in 0..50 {
            let mut rng = stream_rng(9, "t", step);
            let m = mask_tokens(&seq, 1e-9, &mut rng).unwrap();
            assert_eq!(m.mask_positions.len(), 1);
            let pos = m.mask_positions[0];
            assert!(pos >= 1 && pos < seq.true_length);
        }
    }

    #[test]
    fn mask_fraction_matches_rate_statistically() {
        // 10_000 trials on a 20-content-token sentence at rate 0.15.
        let words: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
        let sentence = words.join(" ");
        let v = Vocab::build(&corpus(&[&sentence]), 40).unwrap();
        let seq = encode(&sentence, &v, 24);
        let mut total = 0usize;
        for step in 0..10_000u64 {
            let mut rng = stream_rng(5, "mc", step);
            total += mask_tokens(&seq, 0.15, &mut rng).unwrap().mask_positions.len();
        }
        let fraction = total as f64 / (10_000.0 * 20.0);
        assert!((fraction - 0.15).abs() < 0.01, "empirical fraction {fraction}");
    }

    #[test]
    fn unmaskable_sequence_is_an_error() {
        let v = Vocab::build(&corpus(&["a"]), 5).unwrap();
        let seq = encode("", &v, 4);
        let mut rng = stream_rng(0, "t", 0);
        assert!(matches!(mask_tokens(&seq, 0.5, &mut rng), Err(TextError::Unmaskable(1))));
    }

    #[test]
    fn repetition_duplicates_in_place() {
        let v = Vocab::build(&corpus(&["a b c"]), 8).unwrap();
        let seq = encode("a b c", &v, 8);
        // fraction forcing exactly one duplication
        for step in 0..20 {
            let mut rng = stream_rng(3, "rep", step);
            let out = augment_word_repetition(&seq, 0.2, &mut rng).unwrap();
            assert_eq!(out.true_length, 5);
            let toks = decode(&out, &v);
            let orig = ["a", "b", "c"];
            let mut found = false;
            for pair in toks.windows(2) {
                if pair[0] == pair[1] {
                    assert!(orig.contains(&pair[0].as_str()));
                    found = true;
                }
            }
            assert!(found, "no duplicate in {toks:?}");
        }
    }

    #[test]
    fn repetition_fraction_zero_is_identity() {
        let v = Vocab::build(&corpus(&["a b c"]), 8).unwrap();
        let seq = encode("a b c", &v, 8);
        let mut rng = stream_rng(3, "rep", 0);
        let out = augment_word_repetition(&seq, 0.0, &mut rng).unwrap();
        assert_eq!(out, seq);
    }

    #[test]
    fn repetition_adds_ceil_fraction_tokens_before_truncation() {
        let words: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
        let sentence = words.join(" ");
        let v = Vocab::build(&corpus(&[&sentence]), 24).unwrap();
        let seq = encode(&sentence, &v, 32); // room to grow
        let expected_added = (0.32f64 * 10.0).ceil() as usize;
        for step in 0..1000u64 {
            let mut rng = stream_rng(17, "rep", step);
            let out = augment_word_repetition(&seq, 0.32, &mut rng).unwrap();
            assert_eq!(out.true_length, seq.true_length + expected_added);
        }
    }

    #[test]
    fn drop_one_word_requires_three_and_removes_one() {
        let v = Vocab::build(&corpus(&["a b c"]), 8).unwrap();
        let two = encode("a b", &v, 8);
        let mut rng = stream_rng(0, "d", 0);
        assert!(matches!(augment_drop_one_word(&two, &mut rng), Err(TextError::Undroppable(3))));

        let three = encode("a b c", &v, 8);
        let out = augment_drop_one_word(&three, &mut rng).unwrap();
        assert_eq!(out.true_length, three.true_length - 1);
    }

    #[test]
    fn drop_one_word_is_uniform_over_choices() {
        let v = Vocab::build(&corpus(&["a b c"]), 8).unwrap();
        let seq = encode("a b c", &v, 8);
        let mut counts = HashMap::new();
        let n = 3000u64;
        for step in 0..n {
            let mut rng = stream_rng(23, "drop", step);
            let out = augment_drop_one_word(&seq, &mut rng).unwrap();
            *counts.entry(decode(&out, &v).join(" ")).or_insert(0u64) += 1;
        }
        assert_eq!(counts.len(), 3);
        // chi-squared against uniform 1/3: 2 dof, 99.9% critical value 13.8
        let expected = n as f64 / 3.0;
        let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 13.8, "chi2 {chi2}, counts {counts:?}");
    }

    #[test]
    fn masking_never_touches_cls_or_pad_on_random_batches() {
        let lines: Vec<String> = (0..50)
            .map(|i| (0..(1 + i % 9)).map(|j| format!("w{}", (i + j) % 13)).collect::<Vec<_>>().join(" "))
            .collect();
        let v = Vocab::build(&lines, 64).unwrap();
        for (i, line) in lines.iter().enumerate() {
            let seq = encode(line, &v, 12);
            let mut rng = stream_rng(41, "batch", i as u64);
            let m = mask_tokens(&seq, 0.3, &mut rng).unwrap();
            for &pos in &m.mask_positions {
                assert!(pos >= 1 && pos < seq.true_length);
            }
            assert_eq!(m.ids[0], CLS_ID);
            for pos in seq.true_length..seq.ids.len() {
                assert_eq!(m.ids[pos], PAD_ID);
            }
        }
    }

    #[test]
    fn randomized_ops_reproduce_bitwise_given_same_seed() {
        let v = Vocab::build(&corpus(&["a b c d e f g"]), 16).unwrap();
        let seq = encode("a b c d e f g", &v, 12);
        let run = |name: &'static str| {
            let mut r1 = stream_rng(77, name, 3);
            let mut r2 = stream_rng(77, name, 3);
            match name {
                "mask" => (
                    mask_tokens(&seq, 0.25, &mut r1).unwrap().ids,
                    mask_tokens(&seq, 0.25, &mut r2).unwrap().ids,
                ),
                "rep" => (
                    augment_word_repetition(&seq, 0.32, &mut r1).unwrap().ids,
                    augment_word_repetition(&seq, 0.32, &mut r2).unwrap().ids,
                ),
                _ => (
                    augment_drop_one_word(&seq, &mut r1).unwrap().ids,
                    augment_drop_one_word(&seq, &mut r2).unwrap().ids,
                ),
            }
        };
        for name in ["mask", "rep", "drop"] {
            let (a, b) = run(name);
            assert_eq!(a, b, "op {name} not reproducible");
        }
    }

    #[test]
    fn vocab_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::build(&corpus(&["tokens on lines", "lines of tokens"]), 16).unwrap();
        v.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(v, loaded);
    }
}
