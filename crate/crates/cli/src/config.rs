//! Run configuration: one TOML file with sections, validated up front.
//!
//! Sweeps mutate exactly one key of a parsed config, so the file diffs
//! cleanly across experiments. Two hashes derive from it: `run_hash`
//! covers the fully-resolved config plus vocabulary bytes and is embedded
//! in every CSV; `compat_hash` covers only what a base checkpoint must
//! agree on (architecture, sequence layout, vocabulary) and gates loading.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cmlmcse::contrastive::ContrastiveConfig;
use cmlmcse::encoder::EncoderConfig;
use cmlmcse::rng::hash_bytes;
use cmlmcse::text::DataConfig;
use cmlmcse::trainer::{AugmentMode, LossMode, ModelConfig, TrainConfig};

use crate::AppError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathsSection {
    pub corpus: PathBuf,
    /// Defaults to `<out>/vocab.txt`; pretrain writes it, later stages read it.
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub seq_len: usize,
    pub mask_rate: f32,
    pub max_vocab: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DataConfig::default();
        Self { seq_len: d.seq_len, mask_rate: d.mask_rate, max_vocab: d.max_vocab }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub dropout_p: f32,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        Self {
            d_model: e.d_model,
            n_heads: e.n_heads,
            n_layers: e.n_layers,
            d_ff: e.d_ff,
            dropout_p: e.dropout_p,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AuxSection {
    pub extractor_layers: usize,
    pub fusioner_layers: usize,
}

impl Default for AuxSection {
    fn default() -> Self {
        Self { extractor_layers: 3, fusioner_layers: 2 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveSection {
    pub temperature: f32,
}

impl Default for ContrastiveSection {
    fn default() -> Self {
        Self { temperature: ContrastiveConfig::default().temperature }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub lambda: f32,
    pub learning_rate: f32,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub warmup_steps: u64,
    pub freeze_extractor: bool,
    pub loss_mode: LossMode,
    pub augment: AugmentMode,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lambda: t.lambda,
            learning_rate: t.learning_rate,
            steps: t.steps,
            batch_size: t.batch_size,
            seed: t.seed,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            warmup_steps: t.warmup_steps,
            freeze_extractor: t.freeze_extractor,
            loss_mode: LossMode::Full,
            augment: AugmentMode::DropoutOnly,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Size of the generated synthetic STS set used by `gen-sts` and sweeps.
    pub sts_pairs: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { sts_pairs: 150 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub paths: PathsSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub aux: AuxSection,
    #[serde(default)]
    pub contrastive: ContrastiveSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Default, Clone, Copy)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub lambda: Option<f32>,
    pub mask_rate: Option<f32>,
}

impl RunConfig {
    /// Parse and validate; toml errors carry line/column locations.
    pub fn load(path: &Path, overrides: Overrides) -> Result<Self, AppError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| AppError::config(format!("config {}: {e}", path.display())))?;
        if let Some(seed) = overrides.seed {
            cfg.train.seed = seed;
        }
        if let Some(lambda) = overrides.lambda {
            cfg.train.lambda = lambda;
        }
        if let Some(rate) = overrides.mask_rate {
            cfg.data.mask_rate = rate;
        }
        cfg.validate(path)?;
        Ok(cfg)
    }

    fn validate(&self, path: &Path) -> Result<(), AppError> {
        if !self.paths.corpus.exists() {
            return Err(AppError::config(format!(
                "config {}: corpus file {} does not exist",
                path.display(),
                self.paths.corpus.display()
            )));
        }
        // structural validation happens through the core config
        self.to_model_config(8).validate().map_err(|e| AppError::config(e.to_string()))?;
        if self.eval.sts_pairs < 9 {
            return Err(AppError::config(format!(
                "eval.sts_pairs = {} too small for three strata",
                self.eval.sts_pairs
            )));
        }
        Ok(())
    }

    /// Resolved core config; `vocab_size` comes from the built vocabulary.
    pub fn to_model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                d_model: self.encoder.d_model,
                n_heads: self.encoder.n_heads,
                n_layers: self.encoder.n_layers,
                d_ff: self.encoder.d_ff,
                dropout_p: self.encoder.dropout_p,
                max_seq_len: self.data.seq_len,
                vocab_size,
            },
            extractor_layers: self.aux.extractor_layers,
            fusioner_layers: self.aux.fusioner_layers,
            data: DataConfig {
                seq_len: self.data.seq_len,
                mask_rate: self.data.mask_rate,
                max_vocab: self.data.max_vocab,
                seed: self.train.seed,
            },
            contrastive: ContrastiveConfig { temperature: self.contrastive.temperature },
            train: TrainConfig {
                lambda: self.train.lambda,
                learning_rate: self.train.learning_rate,
                steps: self.train.steps,
                batch_size: self.train.batch_size,
                seed: self.train.seed,
                beta1: self.train.beta1,
                beta2: self.train.beta2,
                epsilon: self.train.epsilon,
                warmup_steps: self.train.warmup_steps,
                freeze_extractor: self.train.freeze_extractor,
            },
            config_hash: 0,
        }
    }

    pub fn vocab_path(&self, out_dir: &Path) -> PathBuf {
        self.paths.vocab.clone().unwrap_or_else(|| out_dir.join("vocab.txt"))
    }

    /// Full-config + vocabulary hash for CSV headers.
    pub fn run_hash(&self, vocab_file: &str) -> u64 {
        let canonical = toml::to_string(self).unwrap_or_default();
        hash_bytes(format!("{canonical}\x00{vocab_file}").as_bytes())
    }

    /// What a base checkpoint must agree on to be usable.
    pub fn compat_hash(&self, vocab_file: &str) -> u64 {
        let key = format!(
            "d_model={} n_heads={} n_layers={} d_ff={} seq_len={} max_vocab={}\x00{}",
            self.encoder.d_model,
            self.encoder.n_heads,
            self.encoder.n_layers,
            self.encoder.d_ff,
            self.data.seq_len,
            self.data.max_vocab,
            vocab_file
        );
        hash_bytes(key.as_bytes())
    }
}
