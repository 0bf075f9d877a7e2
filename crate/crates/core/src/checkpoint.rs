//! Binary checkpoints.
//!
//! Layout: magic `CMCS`, format version u32, the full model config, a phase
//! byte (pretrained base vs full model), per-tensor records (name, shape,
//! frozen flag, f32 little-endian values), Adam moments aligned with the
//! tensor order, the rng bookkeeping (seed + step — streams are derived per
//! step, so that pair is the entire rng state), and a trailing CRC-32 of
//! everything before it. Serialization is canonical: save → load → save is
//! byte-identical.

use std::path::Path;

use thiserror::Error;

use crate::contrastive::ContrastiveConfig;
use crate::encoder::{BlockParams, EncoderConfig, EncoderParams, MlmHead};
use crate::tensor::{ParamStore, Tensor};
use crate::text::DataConfig;
use crate::trainer::{AdamState, ModelConfig, ModelState, PretrainedModel, TrainConfig};

pub const MAGIC: &[u8; 4] = b"CMCS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint format version {found} (supported: {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("truncated or malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// Either phase of the pipeline round-trips through the same container.
pub enum Checkpoint {
    Pretrained(PretrainedModel),
    Full(ModelState),
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        match self {
            Checkpoint::Pretrained(p) => &p.cfg,
            Checkpoint::Full(s) => &s.cfg,
        }
    }
}

// ── CRC-32 (IEEE, reflected) ────────────────────────────────────────

fn crc32_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            k += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
}

pub fn crc32(bytes: &[u8]) -> u32 {
    static TABLE: std::sync::OnceLock<[u32; 256]> = std::sync::OnceLock::new();
    let table = TABLE.get_or_init(crc32_table);
    let mut c = 0xFFFF_FFFFu32;
    for &b in bytes {
        c = table[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

// ── Writer ──────────────────────────────────────────────────────────

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn f32s(&mut self, vs: &[f32]) {
        self.buf.reserve(vs.len() * 4);
        for &v in vs {
            self.f32(v);
        }
    }
}

fn write_config(w: &mut Writer, cfg: &ModelConfig) {
    let e = &cfg.encoder;
    w.u32(e.d_model as u32);
    w.u32(e.n_heads as u32);
    w.u32(e.n_layers as u32);
    w.u32(e.d_ff as u32);
    w.f32(e.dropout_p);
    w.u32(e.max_seq_len as u32);
    w.u32(e.vocab_size as u32);
    w.u32(cfg.extractor_layers as u32);
    w.u32(cfg.fusioner_layers as u32);
    let d = &cfg.data;
    w.u32(d.seq_len as u32);
    w.f32(d.mask_rate);
    w.u32(d.max_vocab as u32);
    w.u64(d.seed);
    w.f32(cfg.contrastive.temperature);
    let t = &cfg.train;
    w.f32(t.lambda);
    w.f32(t.learning_rate);
    w.u64(t.steps);
    w.u32(t.batch_size as u32);
    w.u64(t.seed);
    w.f32(t.beta1);
    w.f32(t.beta2);
    w.f32(t.epsilon);
    w.u64(t.warmup_steps);
    w.u8(t.freeze_extractor as u8);
    w.u64(cfg.config_hash);
}

/// Serialize a checkpoint; the store is walked in id order so bytes are
/// canonical.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let (store, adam, step, phase) = match ckpt {
        Checkpoint::Pretrained(p) => (&p.store, None, p.steps_done, 0u8),
        Checkpoint::Full(s) => (&s.store, Some(&s.adam), s.step, 1u8),
    };
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    write_config(&mut w, ckpt.config());
    w.u8(phase);

    w.u32(store.len() as u32);
    for id in store.ids() {
        let t = store.value(id);
        w.str(store.name(id));
        w.u32(t.shape().len() as u32);
        for &d in t.shape() {
            w.u32(d as u32);
        }
        w.u8(store.is_frozen(id) as u8);
        w.f32s(t.data());
    }

    match adam {
        Some(adam) => {
            w.u8(1);
            w.u64(adam.t);
            for id in store.ids() {
                w.f32s(&adam.m[id.index()]);
                w.f32s(&adam.v[id.index()]);
            }
        }
        None => w.u8(0),
    }

    // rng state: streams are keyed by (seed, name, step), so this is all of it
    w.u64(ckpt.config().train.seed);
    w.u64(step);

    let crc = crc32(&w.buf);
    w.u32(crc);
    std::fs::write(path, &w.buf)?;
    Ok(())
}

// ── Reader ──────────────────────────────────────────────────────────

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Malformed(format!(
                "need {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|e| CheckpointError::Malformed(format!("non-utf8 name: {e}")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n * 4)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn read_config(r: &mut Reader) -> Result<ModelConfig> {
    let encoder = EncoderConfig {
        d_model: r.u32()? as usize,
        n_heads: r.u32()? as usize,
        n_layers: r.u32()? as usize,
        d_ff: r.u32()? as usize,
        dropout_p: r.f32()?,
        max_seq_len: r.u32()? as usize,
        vocab_size: r.u32()? as usize,
    };
    let extractor_layers = r.u32()? as usize;
    let fusioner_layers = r.u32()? as usize;
    let data = DataConfig {
        seq_len: r.u32()? as usize,
        mask_rate: r.f32()?,
        max_vocab: r.u32()? as usize,
        seed: r.u64()?,
    };
    let contrastive = ContrastiveConfig { temperature: r.f32()? };
    let train = TrainConfig {
        lambda: r.f32()?,
        learning_rate: r.f32()?,
        steps: r.u64()?,
        batch_size: r.u32()? as usize,
        seed: r.u64()?,
        beta1: r.f32()?,
        beta2: r.f32()?,
        epsilon: r.f32()?,
        warmup_steps: r.u64()?,
        freeze_extractor: r.u8()? != 0,
    };
    let config_hash = r.u64()?;
    Ok(ModelConfig {
        encoder,
        extractor_layers,
        fusioner_layers,
        data,
        contrastive,
        train,
        config_hash,
    })
}

fn collect_block(store: &ParamStore, prefix: &str) -> Result<BlockParams> {
    let find = |suffix: &str| {
        store
            .find(&format!("{prefix}.{suffix}"))
            .ok_or_else(|| CheckpointError::MissingTensor(format!("{prefix}.{suffix}")))
    };
    Ok(BlockParams {
        wq: find("wq")?,
        bq: find("bq")?,
        wk: find("wk")?,
        bk: find("bk")?,
        wv: find("wv")?,
        bv: find("bv")?,
        wo: find("wo")?,
        bo: find("bo")?,
        ln1_g: find("ln1_g")?,
        ln1_b: find("ln1_b")?,
        w1: find("w1")?,
        b1: find("b1")?,
        w2: find("w2")?,
        b2: find("b2")?,
        ln2_g: find("ln2_g")?,
        ln2_b: find("ln2_b")?,
    })
}

fn collect_encoder(store: &ParamStore, prefix: &str, n_layers: usize) -> Result<EncoderParams> {
    let tok_emb = store
        .find(&format!("{prefix}.tok_emb"))
        .ok_or_else(|| CheckpointError::MissingTensor(format!("{prefix}.tok_emb")))?;
    let pos_emb = store
        .find(&format!("{prefix}.pos_emb"))
        .ok_or_else(|| CheckpointError::MissingTensor(format!("{prefix}.pos_emb")))?;
    let blocks = (0..n_layers)
        .map(|i| collect_block(store, &format!("{prefix}.b{i}")))
        .collect::<Result<Vec<_>>>()?;
    Ok(EncoderParams { tok_emb, pos_emb, blocks })
}

fn collect_head(store: &ParamStore) -> Result<MlmHead> {
    Ok(MlmHead {
        w: store.find("head.w").ok_or_else(|| CheckpointError::MissingTensor("head.w".into()))?,
        b: store.find("head.b").ok_or_else(|| CheckpointError::MissingTensor("head.b".into()))?,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path)?;
    if buf.len() < 8 {
        return Err(CheckpointError::Malformed("file shorter than header".into()));
    }
    let (body, tail) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }

    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let cfg = read_config(&mut r)?;
    let phase = r.u8()?;

    let n_tensors = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..n_tensors {
        let name = r.str()?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let frozen = r.u8()? != 0;
        let len: usize = shape.iter().product();
        let data = r.f32s(len)?;
        let tensor = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Malformed(format!("tensor {name}: {e}")))?;
        store.add(name, tensor, frozen);
    }

    let has_adam = r.u8()? != 0;
    let adam = if has_adam {
        let t = r.u64()?;
        let mut m = Vec::with_capacity(n_tensors);
        let mut v = Vec::with_capacity(n_tensors);
        for id in store.ids() {
            let len = store.value(id).len();
            m.push(r.f32s(len)?);
            v.push(r.f32s(len)?);
        }
        Some(AdamState { m, v, t })
    } else {
        None
    };

    let _seed = r.u64()?;
    let step = r.u64()?;
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes before checksum",
            body.len() - r.pos
        )));
    }

    let main = collect_encoder(&store, "main", cfg.encoder.n_layers)?;
    let head = collect_head(&store)?;
    match phase {
        0 => Ok(Checkpoint::Pretrained(PretrainedModel {
            store,
            encoder: main,
            head,
            cfg,
            steps_done: step,
        })),
        1 => {
            let extractor = collect_encoder(&store, "ext", cfg.extractor_layers)?;
            let fusioner = (0..cfg.fusioner_layers)
                .map(|i| collect_block(&store, &format!("fus.b{i}")))
                .collect::<Result<Vec<_>>>()?;
            let adam = adam.ok_or_else(|| {
                CheckpointError::Malformed("full checkpoint without optimizer moments".into())
            })?;
            Ok(Checkpoint::Full(ModelState {
                store,
                main,
                extractor,
                fusioner,
                head,
                adam,
                step,
                cfg,
            }))
        }
        other => Err(CheckpointError::Malformed(format!("unknown phase byte {other}"))),
    }
}
