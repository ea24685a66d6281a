//! Subcommand implementations: flat-config merging, then thin calls into
//! the library. Flag > config file > default everywhere.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use lavaman_core::dataio::{generate_corpus, load_corpus, read_json, read_png, write_json, write_png, Corpus};
use lavaman_core::encoders::{EncoderConfig, TextConfig, Vocabulary};
use lavaman_core::eval::{
    run_benchmark, run_mask_ratio_ablation, AblationConfig, BenchmarkOptions, SuccessThresholds,
};
use lavaman_core::heads::extract_se2;
use lavaman_core::model::{FusionConfig, Model};
use lavaman_core::rng::rng_from_seed;
use lavaman_core::scenegen::{
    make_splits, Catalog, Episode, ImageU8, SceneGenConfig, SplitTag, TaskKind,
};
use lavaman_core::training::checkpoint::vocab_sidecar;
use lavaman_core::training::{
    finetune_action, finetune_affordance, finetune_bbox, load_affordance_model,
    load_pretext_model, train_pretext, LossScope, StepLog, TrainConfig,
};
use lavaman_core::{Error, Result};

use crate::{
    AblateMaskArgs, Cmd, EvalArgs, FinetuneArgs, GenDataArgs, PredictArgs, PretrainArgs,
};

pub fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Pretrain(a) => pretrain(a),
        Cmd::Finetune(a) => finetune(a),
        Cmd::Eval(a) => eval(a),
        Cmd::AblateMask(a) => ablate_mask(a),
        Cmd::Predict(a) => predict(a),
    }
}

fn read_config<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        Some(p) => read_json(p),
        None => Ok(T::default()),
    }
}

fn require<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| Error::invalid(format!("{flag} is required (flag or config file)")))
}

/// Optional relocation root for intermediate artifacts (step logs, per-ratio
/// ablation checkpoints).
fn cache_dir() -> Option<PathBuf> {
    std::env::var_os("LAVAMAN_CACHE").map(PathBuf::from)
}

fn default_log_path(out: &Path) -> PathBuf {
    let name = format!(
        "{}.log.jsonl",
        out.file_stem().and_then(|s| s.to_str()).unwrap_or("train")
    );
    match cache_dir() {
        Some(c) => c.join(name),
        None => out.with_file_name(name),
    }
}

fn parse_task(s: &str) -> Result<TaskKind> {
    TaskKind::from_str(&s.replace('-', "_"))
        .ok_or_else(|| Error::invalid(format!("unknown task {s:?}; expected packing_seq or packing_grp")))
}

fn parse_split(s: &str) -> Result<SplitTag> {
    SplitTag::from_str(s.trim())
        .ok_or_else(|| Error::invalid(format!("unknown split {s:?}; expected train, seen, intra, or inter")))
}

fn parse_loss_scope(s: &str) -> Result<LossScope> {
    match s.replace('-', "_").as_str() {
        "all_patches" => Ok(LossScope::AllPatches),
        "masked_only" => Ok(LossScope::MaskedOnly),
        _ => Err(Error::invalid(format!(
            "unknown loss scope {s:?}; expected all_patches or masked_only"
        ))),
    }
}

/// Model preset resized to the corpus images.
fn preset_configs(name: &str, image_size: usize) -> Result<(EncoderConfig, TextConfig, FusionConfig)> {
    let (mut enc, text, fusion) = match name.replace('-', "_").as_str() {
        "desk" => (EncoderConfig::desk(), TextConfig::desk(), FusionConfig::desk()),
        "paper_scale" => {
            (EncoderConfig::paper_scale(), TextConfig::paper_scale(), FusionConfig::paper_scale())
        }
        _ => {
            return Err(Error::invalid(format!(
                "unknown preset {name:?}; expected desk or paper_scale"
            )))
        }
    };
    enc.image_size = image_size;
    Ok((enc, text, fusion))
}

fn train_refs(corpus: &Corpus) -> Result<Vec<&Episode>> {
    let eps = corpus.with_tag(SplitTag::Train);
    if eps.is_empty() {
        return Err(Error::invalid("corpus has no train episodes"));
    }
    Ok(eps)
}

/// Vocabulary over the training split only, so held-out words stay unseen.
fn train_vocab(corpus: &Corpus) -> Result<Vocabulary> {
    let texts: Vec<&str> =
        train_refs(corpus)?.iter().map(|e| e.instruction.as_str()).collect();
    Ok(Vocabulary::from_corpus(&texts))
}

/// JSONL step logger; adds wall-clock seconds to each library log record.
struct JsonlLogger {
    out: BufWriter<File>,
    started: Instant,
    io_error: Option<std::io::Error>,
    path: PathBuf,
}

#[derive(Serialize)]
struct LogLine<'a> {
    #[serde(flatten)]
    log: &'a StepLog,
    elapsed_s: f64,
}

impl JsonlLogger {
    fn create(path: PathBuf) -> Result<JsonlLogger> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(JsonlLogger { out: BufWriter::new(file), started: Instant::now(), io_error: None, path })
    }

    fn write(&mut self, log: &StepLog) {
        if self.io_error.is_some() {
            return;
        }
        let line = LogLine { log, elapsed_s: self.started.elapsed().as_secs_f64() };
        let res = serde_json::to_string(&line)
            .map_err(std::io::Error::other)
            .and_then(|s| writeln!(self.out, "{s}"));
        if let Err(e) = res {
            self.io_error = Some(e);
        }
    }

    fn finish(mut self) -> Result<()> {
        if let Some(e) = self.io_error.take() {
            return Err(Error::io(&self.path, e));
        }
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct GenDataFile {
    out: Option<PathBuf>,
    episodes: Option<usize>,
    seen: Option<usize>,
    intra: Option<usize>,
    inter: Option<usize>,
    task: Option<String>,
    image_size: Option<usize>,
    split_config: Option<PathBuf>,
    workers: Option<usize>,
    force: Option<bool>,
    seed: Option<u64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SplitConfigFile {
    inter_classes: Option<usize>,
    intra_classes: Option<usize>,
    held_per_class: Option<usize>,
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let file: GenDataFile = read_config(&a.config)?;
    let out = require(a.out.or(file.out), "--out")?;
    let episodes = a.episodes.or(file.episodes).unwrap_or(100);
    let seen = a.seen.or(file.seen).unwrap_or(0);
    let intra = a.intra.or(file.intra).unwrap_or(0);
    let inter = a.inter.or(file.inter).unwrap_or(0);
    let image_size = a.image_size.or(file.image_size).unwrap_or(64);
    let workers = a.workers.or(file.workers).unwrap_or(1);
    let force = a.force || file.force.unwrap_or(false);
    let seed = a.seed.or(file.seed).unwrap_or(0);
    let task = match a.task.or(file.task) {
        Some(s) => Some(parse_task(&s)?),
        None => None,
    };
    let split_file: SplitConfigFile = match a.split_config.or(file.split_config) {
        Some(p) => read_json(&p)?,
        None => SplitConfigFile::default(),
    };

    if out.exists() {
        let occupied = std::fs::read_dir(&out)
            .map_err(|e| Error::io(&out, e))?
            .next()
            .is_some();
        if occupied && !force {
            return Err(Error::invalid(format!(
                "output directory {} is not empty; pass --force to write anyway",
                out.display()
            )));
        }
    }

    let catalog = Catalog::desk();
    let splits = make_splits(
        &catalog,
        split_file.inter_classes.unwrap_or(4),
        split_file.intra_classes.unwrap_or(4),
        split_file.held_per_class.unwrap_or(2),
        seed,
    )?;
    let scene = SceneGenConfig { image_size, ..SceneGenConfig::default() };
    let counts = [
        (SplitTag::Train, episodes),
        (SplitTag::Seen, seen),
        (SplitTag::Intra, intra),
        (SplitTag::Inter, inter),
    ];
    let index = generate_corpus(&out, &catalog, &splits, &scene, &counts, task, seed, workers)?;
    println!("wrote {} episodes to {}", index.episodes.len(), out.display());
    Ok(())
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct PretrainFile {
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    steps: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    weight_decay: Option<f64>,
    warmup_frac: Option<f64>,
    clip_norm: Option<f64>,
    mask_ratio: Option<f64>,
    loss_scope: Option<String>,
    preset: Option<String>,
    log: Option<PathBuf>,
    seed: Option<u64>,
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let file: PretrainFile = read_config(&a.config)?;
    let data = require(a.data.or(file.data), "--data")?;
    let out = a.out.or(file.out).unwrap_or_else(|| PathBuf::from("pretext.ckpt"));
    let preset = a.preset.or(file.preset).unwrap_or_else(|| "desk".into());
    let base = TrainConfig::pretext();
    let cfg = TrainConfig {
        steps: a.steps.or(file.steps).unwrap_or(base.steps),
        batch_size: a.batch_size.or(file.batch_size).unwrap_or(base.batch_size),
        learning_rate: a.lr.or(file.lr).unwrap_or(base.learning_rate),
        weight_decay: a.weight_decay.or(file.weight_decay).unwrap_or(base.weight_decay),
        warmup_frac: a.warmup_frac.or(file.warmup_frac).unwrap_or(base.warmup_frac),
        clip_norm: a.clip_norm.or(file.clip_norm).unwrap_or(base.clip_norm),
        mask_ratio: a.mask_ratio.or(file.mask_ratio).unwrap_or(base.mask_ratio),
        loss_scope: match a.loss_scope.or(file.loss_scope) {
            Some(s) => parse_loss_scope(&s)?,
            None => base.loss_scope,
        },
        freeze_backbone: false,
        seed: a.seed.or(file.seed).unwrap_or(base.seed),
    };

    let corpus = load_corpus(&data)?;
    let eps = train_refs(&corpus)?;
    let vocab = train_vocab(&corpus)?;
    let (enc, text, fusion) = preset_configs(&preset, corpus.config.scene.image_size)?;

    let mut logger = JsonlLogger::create(a.log.or(file.log).unwrap_or_else(|| default_log_path(&out)))?;
    let (_, outcome) = train_pretext::<f32>(&eps, &vocab, enc, text, fusion, &cfg, &out, &mut |s| {
        logger.write(s)
    })?;
    logger.finish()?;
    println!(
        "pretext loss {:.6} -> {:.6}; checkpoint {}",
        outcome.initial_loss,
        outcome.final_loss,
        outcome.checkpoint.display()
    );
    Ok(())
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FinetuneFile {
    data: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    scratch: Option<bool>,
    head: Option<String>,
    out: Option<PathBuf>,
    steps: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    weight_decay: Option<f64>,
    warmup_frac: Option<f64>,
    clip_norm: Option<f64>,
    freeze_backbone: Option<bool>,
    preset: Option<String>,
    log: Option<PathBuf>,
    seed: Option<u64>,
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let file: FinetuneFile = read_config(&a.config)?;
    let data = require(a.data.or(file.data), "--data")?;
    let head = a.head.or(file.head).unwrap_or_else(|| "affordance".into());
    let out = a
        .out
        .or(file.out)
        .unwrap_or_else(|| PathBuf::from(format!("{head}.ckpt")));
    let checkpoint = a.checkpoint.or(file.checkpoint);
    let scratch = a.scratch || file.scratch.unwrap_or(false);
    let preset = a.preset.or(file.preset).unwrap_or_else(|| "desk".into());
    let base = TrainConfig::finetune();
    let cfg = TrainConfig {
        steps: a.steps.or(file.steps).unwrap_or(base.steps),
        batch_size: a.batch_size.or(file.batch_size).unwrap_or(base.batch_size),
        learning_rate: a.lr.or(file.lr).unwrap_or(base.learning_rate),
        weight_decay: a.weight_decay.or(file.weight_decay).unwrap_or(base.weight_decay),
        warmup_frac: a.warmup_frac.or(file.warmup_frac).unwrap_or(base.warmup_frac),
        clip_norm: a.clip_norm.or(file.clip_norm).unwrap_or(base.clip_norm),
        mask_ratio: base.mask_ratio,
        loss_scope: base.loss_scope,
        freeze_backbone: a.freeze_backbone || file.freeze_backbone.unwrap_or(false),
        seed: a.seed.or(file.seed).unwrap_or(base.seed),
    };

    let corpus = load_corpus(&data)?;
    let eps = train_refs(&corpus)?;

    let (model, vocab) = match (checkpoint, scratch) {
        (Some(_), true) => {
            return Err(Error::invalid("--checkpoint and --scratch are mutually exclusive"))
        }
        (None, false) => {
            return Err(Error::invalid("pass --checkpoint <pretext.ckpt> or --scratch"))
        }
        (Some(ckpt), false) => {
            let (_, model) = load_pretext_model::<f32>(&ckpt)?;
            let vocab = Vocabulary::load(&vocab_sidecar(&ckpt))?;
            (model, vocab)
        }
        (None, true) => {
            let vocab = train_vocab(&corpus)?;
            let (enc, text, fusion) = preset_configs(&preset, corpus.config.scene.image_size)?;
            let mut rng = rng_from_seed(cfg.seed);
            let model = Model::<f32>::new(&mut rng, enc, text, fusion, vocab.len(), vocab.id())?;
            (model, vocab)
        }
    };

    let mut logger = JsonlLogger::create(a.log.or(file.log).unwrap_or_else(|| default_log_path(&out)))?;
    let mut log = |s: &StepLog| logger.write(s);
    let outcome = match head.as_str() {
        "affordance" => finetune_affordance(&eps, &vocab, model, &cfg, &out, &mut log)?.1,
        "action" => finetune_action(&eps, &vocab, model, &cfg, &out, &mut log)?.1,
        "bbox" => finetune_bbox(&eps, &vocab, model, &cfg, &out, &mut log)?.1,
        _ => {
            return Err(Error::invalid(format!(
                "unknown head {head:?}; expected affordance, action, or bbox"
            )))
        }
    };
    logger.finish()?;
    println!(
        "{head} loss {:.6} -> {:.6}; checkpoint {}",
        outcome.initial_loss,
        outcome.final_loss,
        outcome.checkpoint.display()
    );
    Ok(())
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct EvalFile {
    data: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
    splits: Option<String>,
    rot_tol: Option<u32>,
    workers: Option<usize>,
    seed: Option<u64>,
}

fn eval(a: EvalArgs) -> Result<()> {
    let file: EvalFile = read_config(&a.config)?;
    // Accepted for interface uniformity; scoring has no random component.
    let _ = a.seed.or(file.seed);
    let data = require(a.data.or(file.data), "--data")?;
    let checkpoint = require(a.checkpoint.or(file.checkpoint), "--checkpoint")?;
    let out = a.out.or(file.out).unwrap_or_else(|| PathBuf::from("report.json"));
    let splits_csv = a.splits.or(file.splits).unwrap_or_else(|| "seen,intra,inter".into());
    let splits = splits_csv
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(parse_split)
        .collect::<Result<Vec<_>>>()?;
    let opts = BenchmarkOptions {
        splits,
        workers: a.workers.or(file.workers).unwrap_or(1),
        thresholds: SuccessThresholds {
            rot_tol_deg: a.rot_tol.or(file.rot_tol).unwrap_or(10),
        },
        checkpoint: Some(checkpoint.clone()),
    };

    let corpus = load_corpus(&data)?;
    let (_, am) = load_affordance_model::<f32>(&checkpoint)?;
    let vocab = Vocabulary::load(&vocab_sidecar(&checkpoint))?;
    let report = run_benchmark(&am, &vocab, &corpus, &opts)?;
    write_json(&out, &report)?;
    for row in &report.splits {
        println!(
            "{}: success {:.3} pick {:.3} place {:.3} rot {:.3} (n={})",
            row.split.as_str(),
            row.rates.success,
            row.rates.pick,
            row.rates.place,
            row.rates.rot,
            row.rates.n
        );
    }
    println!("report {}", out.display());
    Ok(())
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct AblateFile {
    data: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    ratios: Option<String>,
    pretext_steps: Option<usize>,
    finetune_steps: Option<usize>,
    batch_size: Option<usize>,
    eval_split: Option<String>,
    limit_train: Option<usize>,
    limit_eval: Option<usize>,
    preset: Option<String>,
    seed: Option<u64>,
}

fn ablate_mask(a: AblateMaskArgs) -> Result<()> {
    let file: AblateFile = read_config(&a.config)?;
    let data = require(a.data.or(file.data), "--data")?;
    let out_dir = require(a.out_dir.or(file.out_dir), "--out-dir")?;
    let ratios_csv = a.ratios.or(file.ratios).unwrap_or_else(|| "0.75,0.95,1.0".into());
    let ratios = ratios_csv
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad mask ratio {s:?}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    let eval_split = parse_split(&a.eval_split.or(file.eval_split).unwrap_or_else(|| "seen".into()))?;
    let seed = a.seed.or(file.seed).unwrap_or(0);
    let preset = a.preset.or(file.preset).unwrap_or_else(|| "desk".into());
    let batch_size = a.batch_size.or(file.batch_size).unwrap_or(8);
    let limit_train = a.limit_train.or(file.limit_train).unwrap_or(0);
    let limit_eval = a.limit_eval.or(file.limit_eval).unwrap_or(0);

    let corpus = load_corpus(&data)?;
    let mut train = train_refs(&corpus)?;
    if limit_train > 0 {
        train.truncate(limit_train);
    }
    let mut eval_eps = corpus.with_tag(eval_split);
    if eval_eps.is_empty() {
        return Err(Error::invalid(format!("corpus has no {} episodes", eval_split.as_str())));
    }
    if limit_eval > 0 {
        eval_eps.truncate(limit_eval);
    }
    let vocab = train_vocab(&corpus)?;
    let (encoder, text, fusion) = preset_configs(&preset, corpus.config.scene.image_size)?;

    let cfg = AblationConfig {
        ratios,
        pretext: TrainConfig {
            steps: a.pretext_steps.or(file.pretext_steps).unwrap_or(3000),
            batch_size,
            seed,
            ..TrainConfig::pretext()
        },
        finetune: TrainConfig {
            steps: a.finetune_steps.or(file.finetune_steps).unwrap_or(600),
            batch_size,
            seed,
            ..TrainConfig::finetune()
        },
        encoder,
        text,
        fusion,
        thresholds: SuccessThresholds::default(),
        checkpoint_dir: cache_dir().map(|c| c.join("ablate")),
    };

    let report = run_mask_ratio_ablation::<f32>(
        &train,
        &train,
        &eval_eps,
        &vocab,
        &cfg,
        &out_dir,
        &mut |_| {},
    )?;
    for row in &report.rows {
        println!("ratio {:.2}: success {:.3} (n={})", row.ratio, row.rates.success, row.rates.n);
    }
    println!("table {}", report.table_path.display());
    println!("plot {}", report.plot_path.display());
    Ok(())
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct PredictFile {
    image: Option<PathBuf>,
    instruction: Option<String>,
    checkpoint: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    seed: Option<u64>,
}

/// Alpha-blends a normalized heat map over the input as a color tint.
fn overlay(base: &ImageU8, heat: &ndarray::Array2<f32>, tint: [f64; 3]) -> ImageU8 {
    let peak = heat.iter().copied().fold(f32::MIN, f32::max).max(f32::MIN_POSITIVE);
    let mut out = base.clone();
    for y in 0..base.height.min(heat.shape()[0]) {
        for x in 0..base.width.min(heat.shape()[1]) {
            let a = 0.65 * (heat[[y, x]] / peak) as f64;
            let px = base.get(y, x);
            let mut blended = [0u8; 3];
            for c in 0..3 {
                let v = px[c] as f64 / 255.0 * (1.0 - a) + tint[c] * a;
                blended[c] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
            out.set(y, x, blended);
        }
    }
    out
}

fn predict(a: PredictArgs) -> Result<()> {
    let file: PredictFile = read_config(&a.config)?;
    // Accepted for interface uniformity; inference has no random component.
    let _ = a.seed.or(file.seed);
    let image = require(a.image.or(file.image), "--image")?;
    let instruction = require(a.instruction.or(file.instruction), "--instruction")?;
    let checkpoint = require(a.checkpoint.or(file.checkpoint), "--checkpoint")?;
    let out_dir = a.out_dir.or(file.out_dir).unwrap_or_else(|| PathBuf::from("."));

    let (_, am) = load_affordance_model::<f32>(&checkpoint)?;
    let vocab = Vocabulary::load(&vocab_sidecar(&checkpoint))?;
    let input = read_png(&image)?;
    let start = input.to_array::<f32>();
    let ids = vocab.encode(&instruction, am.model.text_config().max_len)?;
    let (maps, out) = am.infer(&start, &ids)?;
    let action = extract_se2(&maps);

    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    write_png(&out_dir.join("goal_pred.png"), &ImageU8::from_array(&out.goal.image)?)?;

    let norm = maps.normalized();
    write_png(&out_dir.join("affordance_pick.png"), &overlay(&input, &norm.pick, [1.0, 0.1, 0.1]))?;
    let bins = norm.place.shape()[0];
    let mut place_best = ndarray::Array2::<f32>::zeros((input.height, input.width));
    for b in 0..bins {
        for y in 0..input.height {
            for x in 0..input.width {
                place_best[[y, x]] = place_best[[y, x]].max(norm.place[[b, y, x]]);
            }
        }
    }
    write_png(&out_dir.join("affordance_place.png"), &overlay(&input, &place_best, [0.1, 1.0, 0.2]))?;
    write_json(&out_dir.join("action.json"), &action)?;
    println!(
        "pick ({}, {}) theta {}; place ({}, {}) theta {}; artifacts in {}",
        action.pick.u,
        action.pick.v,
        action.pick.theta_deg,
        action.place.u,
        action.place.v,
        action.place.theta_deg,
        out_dir.display()
    );
    Ok(())
}
