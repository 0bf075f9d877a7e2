//! Contrastive sentence-embedding training with a conditional-MLM auxiliary
//! network, built on a small self-contained tensor/autodiff core.
//!
//! The pipeline: a word-level tokenizer feeds a small transformer encoder
//! trained two ways at once — a dual-dropout InfoNCE contrastive loss on the
//! [CLS] embedding, and a conditional masked-token prediction loss in which
//! a frozen copy of the encoder's lower layers extracts token features of
//! the masked sentence while a small trainable fusion stack predicts the
//! masked words from those features plus the sentence embedding spliced in
//! at position 0. Training, checkpointing, and the Spearman STS evaluation
//! harness are all deterministic given a seed.

pub mod auxnet;
pub mod checkpoint;
pub mod contrastive;
pub mod encoder;
pub mod eval;
pub mod rng;
pub mod suite;
pub mod tensor;
pub mod text;
pub mod trainer;

pub use tensor::{Graph, NodeId, ParamId, ParamStore, Tensor, TensorError};
