//! Subcommand implementations: the pipeline from corpus to checkpoints to
//! CSV artifacts.

use std::path::Path;

use cmlmcse::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use cmlmcse::eval::{eval_sts, generate_synthetic_sts, read_sts_tsv, write_sts_tsv, StsPair};
use cmlmcse::suite;
use cmlmcse::text::{encode_corpus, read_corpus, TokenSeq, Vocab};
use cmlmcse::trainer::{
    build_model_state, run_training, warmup_pretrain, AugmentMode, LossMode, ModelConfig,
    ModelState, PretrainedModel,
};

use crate::config::RunConfig;
use crate::csvio::{format_f32, format_rho, guard_output, CsvWriter};
use crate::AppError;

pub struct Workspace {
    pub corpus: Vec<String>,
    pub vocab: Vocab,
    pub seqs: Vec<TokenSeq>,
    pub model_cfg: ModelConfig,
    pub run_hash: u64,
    pub compat_hash: u64,
}

/// Load corpus + vocabulary and resolve the core config. `build_vocab`
/// decides whether the vocabulary is built fresh (pretrain) or must already
/// exist on disk (train/eval stages, which must see the pretrain-time one).
pub fn open_workspace(cfg: &RunConfig, out: &Path, build_vocab: bool) -> Result<Workspace, AppError> {
    let corpus = read_corpus(&cfg.paths.corpus)
        .map_err(|e| AppError::config(format!("corpus {}: {e}", cfg.paths.corpus.display())))?;
    let vocab_path = cfg.vocab_path(out);
    let vocab = if build_vocab {
        Vocab::build(&corpus, cfg.data.max_vocab).map_err(|e| AppError::config(e.to_string()))?
    } else {
        Vocab::load(&vocab_path).map_err(|e| {
            AppError::config(format!("vocab {}: {e} (run pretrain first)", vocab_path.display()))
        })?
    };
    let vocab_file = vocab.to_file_string();
    let mut model_cfg = cfg.to_model_config(vocab.len());
    let compat_hash = cfg.compat_hash(&vocab_file);
    model_cfg.config_hash = compat_hash;
    let seqs = encode_corpus(&corpus, &vocab, cfg.data.seq_len);
    if seqs.is_empty() {
        return Err(AppError::config("corpus has no usable sentences".into()));
    }
    Ok(Workspace {
        corpus,
        vocab,
        seqs,
        model_cfg,
        run_hash: cfg.run_hash(&vocab_file),
        compat_hash,
    })
}

fn ensure_out_dir(out: &Path) -> Result<(), AppError> {
    std::fs::create_dir_all(out)
        .map_err(|e| AppError::config(format!("cannot create {}: {e}", out.display())))
}

pub fn cmd_pretrain(cfg: &RunConfig, out: &Path, force: bool) -> Result<(), AppError> {
    ensure_out_dir(out)?;
    let vocab_path = cfg.vocab_path(out);
    let ckpt_path = out.join("pretrain.ckpt");
    let csv_path = out.join("pretrain_loss.csv");
    guard_output(&vocab_path, force)?;
    guard_output(&ckpt_path, force)?;
    guard_output(&csv_path, force)?;

    let ws = open_workspace(cfg, out, true)?;
    ws.vocab
        .save(&vocab_path)
        .map_err(|e| AppError::config(format!("cannot write vocab: {e}")))?;

    let (pre, losses) = warmup_pretrain(&ws.model_cfg, &ws.seqs)?;
    let mut csv = CsvWriter::new("step,loss", ws.run_hash, cfg.train.seed);
    for (step, loss) in losses.iter().enumerate() {
        csv.row(&[step.to_string(), format_f32(*loss)]);
    }
    csv.write(&csv_path)?;
    save_checkpoint(&Checkpoint::Pretrained(pre), &ckpt_path)
        .map_err(|e| AppError::config(e.to_string()))?;
    eprintln!(
        "pretrain done: {} steps, checkpoint {}, vocab {} tokens",
        losses.len(),
        ckpt_path.display(),
        ws.vocab.len()
    );
    Ok(())
}

fn load_pretrained_base(path: &Path, ws: &Workspace) -> Result<PretrainedModel, AppError> {
    let ckpt = load_checkpoint(path).map_err(|e| AppError::config(e.to_string()))?;
    let Checkpoint::Pretrained(pre) = ckpt else {
        return Err(AppError::config(format!(
            "{} is a fully-trained checkpoint; pass the pretrain checkpoint as --base",
            path.display()
        )));
    };
    if pre.cfg.config_hash != ws.compat_hash {
        return Err(AppError::config(format!(
            "base checkpoint {} was built against a different config/vocab \
             (hash {:016x}, current {:016x})",
            path.display(),
            pre.cfg.config_hash,
            ws.compat_hash
        )));
    }
    Ok(pre)
}

/// Adopt the current run's training-stage settings onto a loaded base.
fn adopt_stage_config(pre: &mut PretrainedModel, model_cfg: &ModelConfig) {
    pre.cfg.extractor_layers = model_cfg.extractor_layers;
    pre.cfg.fusioner_layers = model_cfg.fusioner_layers;
    pre.cfg.data = model_cfg.data.clone();
    pre.cfg.contrastive = model_cfg.contrastive.clone();
    pre.cfg.train = model_cfg.train.clone();
}

pub fn cmd_train(cfg: &RunConfig, base: &Path, out: &Path, force: bool) -> Result<(), AppError> {
    ensure_out_dir(out)?;
    let ckpt_path = out.join("model.ckpt");
    let csv_path = out.join("metrics.csv");
    guard_output(&ckpt_path, force)?;
    guard_output(&csv_path, force)?;

    let ws = open_workspace(cfg, out, false)?;
    if let Some(w) = cmlmcse::contrastive::degenerate_dropout_warning(&ws.model_cfg.encoder) {
        eprintln!("warning: {w}");
    }
    let mut pre = load_pretrained_base(base, &ws)?;
    adopt_stage_config(&mut pre, &ws.model_cfg);
    let mut state = build_model_state(pre)?;

    let mut csv = CsvWriter::new("step,l_contrast,l_mlm,l_total", ws.run_hash, cfg.train.seed);
    run_training(
        &mut state,
        &ws.seqs,
        cfg.train.steps,
        cfg.train.loss_mode,
        cfg.train.augment,
        |step, bd| {
            csv.row(&[
                step.to_string(),
                format_f32(bd.l_contrast),
                format_f32(bd.l_mlm),
                format_f32(bd.l_total),
            ]);
        },
    )?;
    csv.write(&csv_path)?;
    save_checkpoint(&Checkpoint::Full(state), &ckpt_path)
        .map_err(|e| AppError::config(e.to_string()))?;
    eprintln!("train done: {} steps, checkpoint {}", cfg.train.steps, ckpt_path.display());
    Ok(())
}

pub fn cmd_eval(
    cfg: &RunConfig,
    ckpt_path: &Path,
    sts_path: &Path,
    out: &Path,
    force: bool,
) -> Result<(), AppError> {
    ensure_out_dir(out)?;
    let report_path = out.join("eval_report.csv");
    guard_output(&report_path, force)?;

    let ws = open_workspace(cfg, out, false)?;
    let ckpt = load_checkpoint(ckpt_path).map_err(|e| AppError::config(e.to_string()))?;
    if ckpt.config().config_hash != ws.compat_hash {
        return Err(AppError::config(format!(
            "checkpoint {} does not match the current config/vocab",
            ckpt_path.display()
        )));
    }
    let (store, params) = match &ckpt {
        Checkpoint::Pretrained(p) => (&p.store, &p.encoder),
        Checkpoint::Full(s) => (&s.store, &s.main),
    };
    let pairs = read_sts_tsv(sts_path).map_err(|e| AppError::config(e.to_string()))?;
    let rho = eval_sts(store, params, &ws.model_cfg.encoder, &ws.vocab, &pairs)
        .map_err(|e| AppError::numeric(e.to_string()))?;
    let dataset = sts_path.file_stem().and_then(|s| s.to_str()).unwrap_or("sts").to_string();

    let mut csv = CsvWriter::new("dataset,n,rho", ws.run_hash, cfg.train.seed);
    csv.row(&[dataset.clone(), pairs.len().to_string(), format_rho(rho)]);
    csv.write(&report_path)?;
    eprintln!("eval done: {dataset} rho = {rho:.4} over {} pairs", pairs.len());
    Ok(())
}

pub fn cmd_gen_sts(cfg: &RunConfig, out: &Path, force: bool) -> Result<(), AppError> {
    ensure_out_dir(out)?;
    let sts_path = out.join("synthetic_sts.tsv");
    guard_output(&sts_path, force)?;
    let corpus = read_corpus(&cfg.paths.corpus)
        .map_err(|e| AppError::config(format!("corpus {}: {e}", cfg.paths.corpus.display())))?;
    let pairs = generate_synthetic_sts(&corpus, cfg.train.seed, cfg.eval.sts_pairs)
        .map_err(|e| AppError::config(e.to_string()))?;
    write_sts_tsv(&sts_path, &pairs).map_err(|e| AppError::config(e.to_string()))?;
    eprintln!("gen-sts done: {} pairs -> {}", pairs.len(), sts_path.display());
    Ok(())
}

// ── Ablation sweeps ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepKind {
    MaskRate,
    Lambda,
    Layers,
    Augmentation,
    LossRemoval,
}

pub const LAMBDA_GRID: [f32; 8] = [0.0, 0.0001, 0.0005, 0.001, 0.005, 0.01, 0.05, 0.1];
pub const MASK_RATE_GRID: [f32; 6] = [0.15, 0.20, 0.25, 0.30, 0.40, 0.45];
pub const LAYER_GRID: [(usize, usize); 9] =
    [(1, 1), (1, 2), (1, 3), (2, 1), (2, 2), (2, 3), (3, 1), (3, 2), (3, 3)];

pub struct SweepPoint {
    label: Vec<String>,
    patch: Box<dyn Fn(&mut ModelConfig, &mut LossMode, &mut AugmentMode)>,
}

fn sweep_points(kind: SweepKind) -> (&'static str, &'static str, Vec<SweepPoint>) {
    match kind {
        SweepKind::Lambda => (
            "sweep_lambda.csv",
            "lambda,rho",
            LAMBDA_GRID
                .iter()
                .map(|&v| SweepPoint {
                    label: vec![format_f32(v)],
                    patch: Box::new(move |cfg, _, _| cfg.train.lambda = v),
                })
                .collect(),
        ),
        SweepKind::MaskRate => (
            "sweep_mask_rate.csv",
            "mask_rate,rho",
            MASK_RATE_GRID
                .iter()
                .map(|&v| SweepPoint {
                    label: vec![format_f32(v)],
                    patch: Box::new(move |cfg, _, _| cfg.data.mask_rate = v),
                })
                .collect(),
        ),
        SweepKind::Layers => (
            "sweep_layers.csv",
            "extractor_layers,fusioner_layers,rho",
            LAYER_GRID
                .iter()
                .map(|&(k, f)| SweepPoint {
                    label: vec![k.to_string(), f.to_string()],
                    patch: Box::new(move |cfg, _, _| {
                        cfg.extractor_layers = k;
                        cfg.fusioner_layers = f;
                    }),
                })
                .collect(),
        ),
        SweepKind::Augmentation => (
            "sweep_augmentation.csv",
            "augmentation,rho",
            vec![
                SweepPoint {
                    label: vec!["word_repetition".into()],
                    patch: Box::new(|_, _, aug| *aug = AugmentMode::WordRepetition { fraction: 0.32 }),
                },
                SweepPoint {
                    label: vec!["drop_one_word".into()],
                    patch: Box::new(|_, _, aug| *aug = AugmentMode::DropOneWord),
                },
                SweepPoint {
                    label: vec!["none".into()],
                    patch: Box::new(|_, _, aug| *aug = AugmentMode::DropoutOnly),
                },
            ],
        ),
        SweepKind::LossRemoval => (
            "sweep_loss_removal.csv",
            "variant,rho",
            vec![
                SweepPoint {
                    label: vec!["no_mlm".into()],
                    patch: Box::new(|_, mode, _| *mode = LossMode::NoMlm),
                },
                SweepPoint {
                    label: vec!["no_contrastive".into()],
                    patch: Box::new(|_, mode, _| *mode = LossMode::NoContrastive),
                },
                SweepPoint {
                    label: vec!["full".into()],
                    patch: Box::new(|_, mode, _| *mode = LossMode::Full),
                },
            ],
        ),
    }
}

/// Train one model per sweep point from the shared base checkpoint and
/// score it on the shared synthetic STS dev set.
pub fn run_sweep_point(
    base: &Path,
    ws: &Workspace,
    mut loss_mode: LossMode,
    mut augment: AugmentMode,
    point: &SweepPoint,
    dev: &[StsPair],
) -> Result<f64, AppError> {
    let mut pre = load_pretrained_base(base, ws)?;
    let mut cfg = ws.model_cfg.clone();
    (point.patch)(&mut cfg, &mut loss_mode, &mut augment);
    cfg.validate()?;
    adopt_stage_config(&mut pre, &cfg);
    let mut state: ModelState = build_model_state(pre)?;
    run_training(&mut state, &ws.seqs, cfg.train.steps, loss_mode, augment, |_, _| {})?;
    let rho = eval_sts(&state.store, &state.main, &cfg.encoder, &ws.vocab, dev)
        .map_err(|e| AppError::numeric(e.to_string()))?;
    Ok(rho)
}

pub fn cmd_ablate(
    cfg: &RunConfig,
    base: &Path,
    kind: SweepKind,
    out: &Path,
    force: bool,
) -> Result<(), AppError> {
    ensure_out_dir(out)?;
    let (file_name, header, points) = sweep_points(kind);
    let csv_path = out.join(file_name);
    guard_output(&csv_path, force)?;

    let ws = open_workspace(cfg, out, false)?;
    let dev = generate_synthetic_sts(&ws.corpus, cfg.train.seed, cfg.eval.sts_pairs)
        .map_err(|e| AppError::config(e.to_string()))?;

    let mut csv = CsvWriter::new(header, ws.run_hash, cfg.train.seed);
    for point in &points {
        match run_sweep_point(base, &ws, cfg.train.loss_mode, cfg.train.augment, point, &dev) {
            Ok(rho) => {
                let mut fields = point.label.clone();
                fields.push(format_rho(rho));
                csv.row(&fields);
                eprintln!("sweep point {:?}: rho = {rho:.4}", point.label);
            }
            Err(e) => {
                // preserve what finished, mark the abort, and fail loudly
                csv.comment(&format!("aborted at point {:?}: {e}", point.label));
                csv.write(&csv_path)?;
                return Err(AppError::numeric(format!(
                    "sweep aborted at point {:?}: {e} (partial CSV kept at {})",
                    point.label,
                    csv_path.display()
                )));
            }
        }
    }
    csv.write(&csv_path)?;
    eprintln!("ablate done: {} points -> {}", points.len(), csv_path.display());
    Ok(())
}

pub fn cmd_gradcheck() -> Result<(), AppError> {
    let results = suite::run_all(100).map_err(|e| AppError::numeric(e.to_string()))?;
    let mut failed = 0;
    for r in &results {
        println!(
            "{:<28} max_rel_err {:>12.3e}  tol {:>8.0e}  {}",
            r.name,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        );
        if !r.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(AppError::check(format!("{failed} gradient check(s) above tolerance")));
    }
    println!("all {} checks passed", results.len());
    Ok(())
}
