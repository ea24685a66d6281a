//! Self-supervised pretext training: masked goal-image prediction.

use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::dataio::BatchSchedule;
use crate::encoders::text::Vocabulary;
use crate::encoders::{EncoderConfig, TextConfig};
use crate::error::{Error, Result};
use crate::grid::patchify;
use crate::mask::sample_mask;
use crate::model::{FusionConfig, Model, OutputGrads};
use crate::nn::NnModule;
use crate::real::Real;
use crate::rng::{derive_seed, rng_from_seed};
use crate::scenegen::Episode;
use crate::training::checkpoint::{save_checkpoint, vocab_sidecar, CheckpointKind};
use crate::training::optim::{clip_grad_norm, lr_multiplier, AdamW};
use crate::training::{loss::pretext_loss, StepLog, TrainConfig};

/// Seed streams, kept distinct so component draws never alias.
pub(crate) const STREAM_MODEL_INIT: u64 = 0x4d4f44;
pub(crate) const STREAM_BATCH: u64 = 0xda7a;
pub(crate) const STREAM_MASK: u64 = 0x6d61_736b_0000_0000;
pub(crate) const STREAM_HEAD_INIT: u64 = 0x4845_4144;

#[derive(Debug, Clone)]
pub struct PretextOutcome {
    /// Mean batch loss of the first and last optimization steps.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
}

pub(crate) fn encode_all(
    episodes: &[&Episode],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    episodes.iter().map(|ep| vocab.encode(&ep.instruction, max_len)).collect()
}

pub(crate) fn check_images(episodes: &[&Episode], image_size: usize) -> Result<()> {
    if episodes.is_empty() {
        return Err(Error::invalid("training needs at least one episode"));
    }
    for ep in episodes {
        for (name, img) in [("start", &ep.start), ("goal", &ep.goal)] {
            if img.height != image_size || img.width != image_size {
                return Err(Error::mismatch(format!(
                    "episode {} {name} image is {}x{}, model expects {image_size}x{image_size}",
                    ep.id, img.height, img.width
                )));
            }
        }
    }
    Ok(())
}

/// Trains a fresh backbone on masked goal prediction and writes a `pretext`
/// checkpoint plus the vocabulary sidecar next to it.
pub fn train_pretext<F: Real>(
    episodes: &[&Episode],
    vocab: &Vocabulary,
    enc: EncoderConfig,
    text_cfg: TextConfig,
    fusion: FusionConfig,
    cfg: &TrainConfig,
    out: &Path,
    log: &mut dyn FnMut(&StepLog),
) -> Result<(Model<F>, PretextOutcome)> {
    cfg.validate()?;
    check_images(episodes, enc.image_size)?;
    let ids = encode_all(episodes, vocab, text_cfg.max_len)?;

    let mut model = Model::<F>::new(
        &mut rng_from_seed(derive_seed(cfg.seed, STREAM_MODEL_INIT)),
        enc,
        text_cfg,
        fusion,
        vocab.len(),
        vocab.id(),
    )?;
    let grid = *model.grid();
    let mut sched = BatchSchedule::new(episodes.len(), cfg.batch_size, derive_seed(cfg.seed, STREAM_BATCH))?;
    let mut opt = AdamW::new(cfg.weight_decay);
    let inv_batch = F::from_f64(1.0 / cfg.batch_size as f64);

    let mut initial_loss = 0.0;
    let mut final_loss = 0.0;
    for step in 0..cfg.steps {
        model.zero_grads();
        let mut batch_loss = 0.0;
        for (k, &ei) in sched.indices(step).iter().enumerate() {
            let ep = episodes[ei];
            let global = (step * cfg.batch_size + k) as u64;
            let mask = sample_mask(&grid, cfg.mask_ratio, derive_seed(cfg.seed, STREAM_MASK + global))?;
            let start = ep.start.to_array::<F>();
            let goal = ep.goal.to_array::<F>();
            let (out_, cache) = model.forward(&start, Some(&goal), &mask, &ids[ei])?;
            let target: Array2<F> = patchify(&goal, &grid)?;
            let (l, mut d) = pretext_loss(&out_.goal.per_patch, &target, &mask, cfg.loss_scope)?;
            d.mapv_inplace(|g| g * inv_batch);
            model.backward(&cache, OutputGrads { d_per_patch: Some(d), ..Default::default() })?;
            batch_loss += l / cfg.batch_size as f64;
        }
        if !batch_loss.is_finite() {
            return Err(Error::numeric(format!("loss diverged at step {step}")));
        }
        let grad_norm = clip_grad_norm(&mut model, cfg.clip_norm);
        let lr = cfg.learning_rate * lr_multiplier(step, cfg.steps, cfg.warmup_steps());
        opt.step(&mut model, lr);
        log(&StepLog { step, loss: batch_loss, lr, grad_norm });
        if step == 0 {
            initial_loss = batch_loss;
        }
        final_loss = batch_loss;
    }

    save_checkpoint(out, CheckpointKind::Pretext, cfg.steps as u64, Some(cfg), &mut model, None)?;
    vocab.save(&vocab_sidecar(out))?;
    Ok((model, PretextOutcome { initial_loss, final_loss, checkpoint: out.to_path_buf() }))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::scenegen::{
        generate_episode, make_splits, Catalog, SceneGenConfig, SplitAssignment, SplitTag, TaskKind,
    };
    use crate::training::checkpoint::load_checkpoint;
    use crate::training::LossScope;

    /// Desk-sized images, tiny everything else; shared across training tests.
    pub(crate) fn tiny_configs() -> (EncoderConfig, TextConfig, FusionConfig) {
        (
            EncoderConfig {
                image_size: 64,
                patch_size: 8,
                embed_dim: 16,
                depth_self: 1,
                depth_bidir: 1,
                heads: 2,
                mlp_ratio: 2.0,
            },
            TextConfig { embed_dim: 8, depth: 1, heads: 2, mlp_ratio: 2.0, max_len: 12 },
            FusionConfig {
                stages: 1,
                heads: 2,
                decoder_depth: 1,
                decoder_dim: 12,
                decoder_heads: 2,
                mlp_ratio: 2.0,
            },
        )
    }

    pub(crate) fn tiny_corpus(n: usize) -> (Vec<Episode>, Vocabulary) {
        let cat = Catalog::desk();
        let splits: SplitAssignment = make_splits(&cat, 4, 4, 2, 11).unwrap();
        let cfg = SceneGenConfig::default();
        let eps: Vec<Episode> = (0..n)
            .map(|i| {
                let task = TaskKind::ALL[i % 2];
                generate_episode(task, &cat, &splits, SplitTag::Train, &cfg, 9000 + i as u64).unwrap()
            })
            .collect();
        let texts: Vec<&str> = eps.iter().map(|e| e.instruction.as_str()).collect();
        let vocab = Vocabulary::from_corpus(&texts);
        (eps, vocab)
    }

    #[test]
    fn pretext_training_runs_and_checkpoints() {
        let (eps, vocab) = tiny_corpus(6);
        let refs: Vec<&Episode> = eps.iter().collect();
        let (enc, text, fusion) = tiny_configs();
        let mut cfg = TrainConfig::pretext();
        cfg.steps = 8;
        cfg.batch_size = 2;
        cfg.seed = 5;
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("pretext.ckpt");
        let mut logs = Vec::new();
        let (model, outcome) = train_pretext::<f32>(
            &refs,
            &vocab,
            enc,
            text,
            fusion,
            &cfg,
            &out,
            &mut |l| logs.push(l.clone()),
        )
        .unwrap();
        assert_eq!(logs.len(), 8);
        assert!(logs.iter().all(|l| l.loss.is_finite() && l.grad_norm.is_finite()));
        assert!(outcome.initial_loss.is_finite());
        assert!(out.exists());
        assert!(vocab_sidecar(&out).exists());

        let (header, loaded, bag) = load_checkpoint::<f32>(&out).unwrap();
        bag.finish().unwrap();
        assert_eq!(header.kind, CheckpointKind::Pretext);
        assert_eq!(header.vocabulary_id, vocab.id());
        let ids = vocab.encode(&eps[0].instruction, 12).unwrap();
        let img = eps[0].start.to_array::<f32>();
        let a = model.infer(&img, &ids).unwrap();
        let b = loaded.infer(&img, &ids).unwrap();
        assert_eq!(a.goal.per_patch, b.goal.per_patch);
    }

    #[test]
    fn pretext_training_is_deterministic() {
        let (eps, vocab) = tiny_corpus(4);
        let refs: Vec<&Episode> = eps.iter().collect();
        let (enc, text, fusion) = tiny_configs();
        let mut cfg = TrainConfig::pretext();
        cfg.steps = 4;
        cfg.batch_size = 2;
        let dir = tempfile::tempdir().unwrap();
        let run = |path: &Path| {
            let mut losses = Vec::new();
            train_pretext::<f32>(&refs, &vocab, enc, text, fusion, &cfg, path, &mut |l| {
                losses.push(l.loss)
            })
            .unwrap();
            losses
        };
        let a = run(&dir.path().join("a.ckpt"));
        let b = run(&dir.path().join("b.ckpt"));
        assert_eq!(a, b);
        assert_eq!(
            std::fs::read(dir.path().join("a.ckpt")).unwrap(),
            std::fs::read(dir.path().join("b.ckpt")).unwrap(),
            "checkpoints must be byte-identical"
        );
    }

    #[test]
    fn masked_only_scope_trains() {
        let (eps, vocab) = tiny_corpus(2);
        let refs: Vec<&Episode> = eps.iter().collect();
        let (enc, text, fusion) = tiny_configs();
        let mut cfg = TrainConfig::pretext();
        cfg.steps = 2;
        cfg.batch_size = 1;
        cfg.loss_scope = LossScope::MaskedOnly;
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("m.ckpt");
        let (_, outcome) =
            train_pretext::<f32>(&refs, &vocab, enc, text, fusion, &cfg, &out, &mut |_| {}).unwrap();
        assert!(outcome.final_loss.is_finite());
    }

    #[test]
    fn rejects_wrong_image_size() {
        let (eps, vocab) = tiny_corpus(1);
        let refs: Vec<&Episode> = eps.iter().collect();
        let (mut enc, text, fusion) = tiny_configs();
        enc.image_size = 32;
        let cfg = TrainConfig::pretext();
        let dir = tempfile::tempdir().unwrap();
        let err = train_pretext::<f32>(
            &refs,
            &vocab,
            enc,
            text,
            fusion,
            &cfg,
            &dir.path().join("x.ckpt"),
            &mut |_| {},
        )
        .unwrap_err();
        assert_eq!(err.code(), "mismatch");
    }
}
