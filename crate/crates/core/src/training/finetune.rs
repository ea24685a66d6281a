//! Downstream heads attached to the pretrained backbone, and their
//! fine-tuning loops. Fine-tuning always runs the backbone in inference form
//! (goal branch fully masked, no goal pixels), so the heads consume exactly
//! what is available at test time; the whole stack trains end to end.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3, Axis};

use crate::dataio::BatchSchedule;
use crate::encoders::text::Vocabulary;
use crate::error::{Error, Result};
use crate::heads::{
    ActionHead, AffordanceHead, AffordanceMaps, BboxHead, BoundingBox,
};
use crate::mask::MaskSpec;
use crate::model::{Model, ModelOutput, OutputGrads};
use crate::nn::param::{join, NnModule, ParamSlot};
use crate::real::Real;
use crate::rng::{derive_seed, rng_from_seed};
use crate::scenegen::Episode;
use crate::training::checkpoint::{
    load_checkpoint, save_checkpoint, vocab_sidecar, CheckpointHeader, CheckpointKind,
};
use crate::training::loss::{action_loss, action_target, affordance_loss, bbox_loss};
use crate::training::optim::{clip_grad_norm, lr_multiplier, AdamW};
use crate::training::pretext::{check_images, encode_all, STREAM_BATCH, STREAM_HEAD_INIT};
use crate::training::{StepLog, TrainConfig};

/// Hidden width of the action and bounding-box MLP heads.
pub const MLP_HEAD_HIDDEN: usize = 256;

fn mean_pool<F: Real>(x: &Array2<F>) -> Array1<F> {
    x.sum_axis(Axis(0)) * F::from_f64(1.0 / x.shape()[0] as f64)
}

fn mean_pool_grad<F: Real>(g: &Array1<F>, rows: usize) -> Array2<F> {
    let scaled = g * F::from_f64(1.0 / rows as f64);
    let mut out = Array2::zeros((rows, g.len()));
    for mut row in out.rows_mut() {
        row.assign(&scaled);
    }
    out
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
}

/// Backbone plus SE(2) affordance decoder.
#[derive(Debug, Clone)]
pub struct AffordanceModel<F: Real> {
    pub model: Model<F>,
    pub head: AffordanceHead<F>,
}

impl<F: Real> NnModule<F> for AffordanceModel<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut dyn ParamSlot<F>)) {
        self.model.visit_params(&join(prefix, "model"), f);
        self.head.visit_params(&join(prefix, "affordance"), f);
    }
}

impl<F: Real> AffordanceModel<F> {
    /// Wraps a backbone with a freshly initialized head.
    pub fn with_new_head(model: Model<F>, seed: u64) -> Self {
        let mut rng = rng_from_seed(derive_seed(seed, STREAM_HEAD_INIT));
        let head = AffordanceHead::new(&mut rng, model.fusion_config().decoder_dim, *model.grid());
        AffordanceModel { model, head }
    }

    /// Full inference: predict the goal, then score pick and place maps.
    pub fn infer(&self, start: &Array3<F>, ids: &[usize]) -> Result<(AffordanceMaps<F>, ModelOutput<F>)> {
        let out = self.model.infer(start, ids)?;
        let (maps, _) = self.head.forward(&out.features.h, start, &out.goal.image)?;
        Ok((maps, out))
    }
}

/// Backbone plus 9-DoF action regressor.
#[derive(Debug, Clone)]
pub struct ActionModel<F: Real> {
    pub model: Model<F>,
    pub head: ActionHead<F>,
}

impl<F: Real> NnModule<F> for ActionModel<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut dyn ParamSlot<F>)) {
        self.model.visit_params(&join(prefix, "model"), f);
        self.head.visit_params(&join(prefix, "action"), f);
    }
}

impl<F: Real> ActionModel<F> {
    pub fn with_new_head(model: Model<F>, seed: u64) -> Self {
        let mut rng = rng_from_seed(derive_seed(seed, STREAM_HEAD_INIT));
        let head = ActionHead::new(&mut rng, model.encoder_config().embed_dim, MLP_HEAD_HIDDEN);
        ActionModel { model, head }
    }

    pub fn infer(&self, start: &Array3<F>, ids: &[usize]) -> Result<(Array1<F>, ModelOutput<F>)> {
        let out = self.model.infer(start, ids)?;
        let pooled = mean_pool(&out.features.pre_decoder);
        let (pred, _) = self.head.forward(&pooled);
        Ok((pred, out))
    }
}

/// Backbone plus referring-expression box regressor.
#[derive(Debug, Clone)]
pub struct BboxModel<F: Real> {
    pub model: Model<F>,
    pub head: BboxHead<F>,
}

impl<F: Real> NnModule<F> for BboxModel<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut dyn ParamSlot<F>)) {
        self.model.visit_params(&join(prefix, "model"), f);
        self.head.visit_params(&join(prefix, "bbox"), f);
    }
}

impl<F: Real> BboxModel<F> {
    pub fn with_new_head(model: Model<F>, seed: u64) -> Self {
        let mut rng = rng_from_seed(derive_seed(seed, STREAM_HEAD_INIT));
        let head = BboxHead::new(
            &mut rng,
            model.encoder_config().embed_dim,
            model.text_config().embed_dim,
            MLP_HEAD_HIDDEN,
        );
        BboxModel { model, head }
    }

    pub fn infer(&self, start: &Array3<F>, ids: &[usize]) -> Result<(BoundingBox, ModelOutput<F>)> {
        let out = self.model.infer(start, ids)?;
        let pooled = mean_pool(&out.features.pre_decoder);
        let (bbox, _) = self.head.forward(&pooled, &out.text_pooled);
        Ok((bbox, out))
    }
}

struct LoopState {
    sched: BatchSchedule,
    opt: AdamW,
    initial_loss: f64,
    final_loss: f64,
}

fn loop_state(n: usize, cfg: &TrainConfig) -> Result<LoopState> {
    Ok(LoopState {
        sched: BatchSchedule::new(n, cfg.batch_size, derive_seed(cfg.seed, STREAM_BATCH))?,
        opt: AdamW::new(cfg.weight_decay),
        initial_loss: 0.0,
        final_loss: 0.0,
    })
}

fn finish_step<F: Real>(
    st: &mut LoopState,
    module: &mut dyn NnModule<F>,
    cfg: &TrainConfig,
    step: usize,
    batch_loss: f64,
    log: &mut dyn FnMut(&StepLog),
) -> Result<()> {
    if !batch_loss.is_finite() {
        return Err(Error::numeric(format!("loss diverged at step {step}")));
    }
    let grad_norm = clip_grad_norm(module, cfg.clip_norm);
    let lr = cfg.learning_rate * lr_multiplier(step, cfg.steps, cfg.warmup_steps());
    st.opt.step(module, lr);
    log(&StepLog { step, loss: batch_loss, lr, grad_norm });
    if step == 0 {
        st.initial_loss = batch_loss;
    }
    st.final_loss = batch_loss;
    Ok(())
}

/// Fine-tunes the backbone plus a fresh affordance head on scripted SE(2)
/// annotations and writes an `affordance` checkpoint.
pub fn finetune_affordance<F: Real>(
    episodes: &[&Episode],
    vocab: &Vocabulary,
    model: Model<F>,
    cfg: &TrainConfig,
    out: &Path,
    log: &mut dyn FnMut(&StepLog),
) -> Result<(AffordanceModel<F>, FinetuneOutcome)> {
    cfg.validate()?;
    check_images(episodes, model.encoder_config().image_size)?;
    let ids = encode_all(episodes, vocab, model.text_config().max_len)?;
    let mut am = AffordanceModel::with_new_head(model, cfg.seed);
    let grid = *am.model.grid();
    let full = MaskSpec::full(&grid);
    let mut st = loop_state(episodes.len(), cfg)?;
    let inv_batch = F::from_f64(1.0 / cfg.batch_size as f64);

    for step in 0..cfg.steps {
        am.zero_grads();
        let mut batch_loss = 0.0;
        for &ei in &st.sched.indices(step) {
            let ep = episodes[ei];
            let start = ep.start.to_array::<F>();
            let (out_, cache) = am.model.forward(&start, None, &full, &ids[ei])?;
            let (maps, hcache) = am.head.forward(&out_.features.h, &start, &out_.goal.image)?;
            let (l, mut g_pick, mut g_place) = affordance_loss(&maps, &ep.action)?;
            g_pick.mapv_inplace(|g| g * inv_batch);
            g_place.mapv_inplace(|g| g * inv_batch);
            let (g_h, _g_start, g_goal) = am.head.backward(&hcache, &g_pick, &g_place);
            if !cfg.freeze_backbone {
                am.model.backward(
                    &cache,
                    OutputGrads { d_h: Some(g_h), d_goal_image: Some(g_goal), ..Default::default() },
                )?;
            }
            batch_loss += l / cfg.batch_size as f64;
        }
        let trainable: &mut dyn NnModule<F> =
            if cfg.freeze_backbone { &mut am.head } else { &mut am };
        finish_step(&mut st, trainable, cfg, step, batch_loss, log)?;
    }

    save_checkpoint(
        out,
        CheckpointKind::Affordance,
        cfg.steps as u64,
        Some(cfg),
        &mut am.model,
        Some(("affordance", &mut am.head)),
    )?;
    vocab.save(&vocab_sidecar(out))?;
    let outcome = FinetuneOutcome {
        initial_loss: st.initial_loss,
        final_loss: st.final_loss,
        checkpoint: out.to_path_buf(),
    };
    Ok((am, outcome))
}

/// Fine-tunes a 9-DoF action regressor on pooled fused state.
pub fn finetune_action<F: Real>(
    episodes: &[&Episode],
    vocab: &Vocabulary,
    model: Model<F>,
    cfg: &TrainConfig,
    out: &Path,
    log: &mut dyn FnMut(&StepLog),
) -> Result<(ActionModel<F>, FinetuneOutcome)> {
    cfg.validate()?;
    check_images(episodes, model.encoder_config().image_size)?;
    let ids = encode_all(episodes, vocab, model.text_config().max_len)?;
    let (h, w) = (model.grid().image_height, model.grid().image_width);
    let mut am = ActionModel::with_new_head(model, cfg.seed);
    let full = MaskSpec::full(am.model.grid());
    let mut st = loop_state(episodes.len(), cfg)?;
    let inv_batch = F::from_f64(1.0 / cfg.batch_size as f64);

    for step in 0..cfg.steps {
        am.zero_grads();
        let mut batch_loss = 0.0;
        for &ei in &st.sched.indices(step) {
            let ep = episodes[ei];
            let start = ep.start.to_array::<F>();
            let (out_, cache) = am.model.forward(&start, None, &full, &ids[ei])?;
            let pooled = mean_pool(&out_.features.pre_decoder);
            let (pred, hcache) = am.head.forward(&pooled);
            let target = action_target(&ep.action, h, w);
            let (l, mut g) = action_loss(&pred, &target)?;
            g.mapv_inplace(|v| v * inv_batch);
            let g_pooled = am.head.backward(&hcache, &g);
            if !cfg.freeze_backbone {
                let rows = out_.features.pre_decoder.shape()[0];
                am.model.backward(
                    &cache,
                    OutputGrads {
                        d_pre_decoder: Some(mean_pool_grad(&g_pooled, rows)),
                        ..Default::default()
                    },
                )?;
            }
            batch_loss += l / cfg.batch_size as f64;
        }
        let trainable: &mut dyn NnModule<F> =
            if cfg.freeze_backbone { &mut am.head } else { &mut am };
        finish_step(&mut st, trainable, cfg, step, batch_loss, log)?;
    }

    save_checkpoint(
        out,
        CheckpointKind::Action,
        cfg.steps as u64,
        Some(cfg),
        &mut am.model,
        Some(("action", &mut am.head)),
    )?;
    vocab.save(&vocab_sidecar(out))?;
    let outcome = FinetuneOutcome {
        initial_loss: st.initial_loss,
        final_loss: st.final_loss,
        checkpoint: out.to_path_buf(),
    };
    Ok((am, outcome))
}

/// Fine-tunes the referring-expression box head.
pub fn finetune_bbox<F: Real>(
    episodes: &[&Episode],
    vocab: &Vocabulary,
    model: Model<F>,
    cfg: &TrainConfig,
    out: &Path,
    log: &mut dyn FnMut(&StepLog),
) -> Result<(BboxModel<F>, FinetuneOutcome)> {
    cfg.validate()?;
    check_images(episodes, model.encoder_config().image_size)?;
    let ids = encode_all(episodes, vocab, model.text_config().max_len)?;
    let mut bm = BboxModel::with_new_head(model, cfg.seed);
    let full = MaskSpec::full(bm.model.grid());
    let mut st = loop_state(episodes.len(), cfg)?;
    let inv_batch = 1.0 / cfg.batch_size as f64;

    for step in 0..cfg.steps {
        bm.zero_grads();
        let mut batch_loss = 0.0;
        for &ei in &st.sched.indices(step) {
            let ep = episodes[ei];
            let start = ep.start.to_array::<F>();
            let (out_, cache) = bm.model.forward(&start, None, &full, &ids[ei])?;
            let pooled = mean_pool(&out_.features.pre_decoder);
            let (pred, hcache) = bm.head.forward(&pooled, &out_.text_pooled);
            let [bx, by, bw, bh] = ep.meta.target_bbox;
            let gt = BoundingBox { x: bx, y: by, w: bw, h: bh };
            let (l, g) = bbox_loss(&pred, &gt)?;
            let g_f: [F; 4] = [
                F::from_f64(g[0] * inv_batch),
                F::from_f64(g[1] * inv_batch),
                F::from_f64(g[2] * inv_batch),
                F::from_f64(g[3] * inv_batch),
            ];
            let (g_pv, g_pt) = bm.head.backward(&hcache, g_f);
            if !cfg.freeze_backbone {
                let rows = out_.features.pre_decoder.shape()[0];
                bm.model.backward(
                    &cache,
                    OutputGrads {
                        d_pre_decoder: Some(mean_pool_grad(&g_pv, rows)),
                        d_text_pooled: Some(g_pt),
                        ..Default::default()
                    },
                )?;
            }
            batch_loss += l * inv_batch;
        }
        let trainable: &mut dyn NnModule<F> =
            if cfg.freeze_backbone { &mut bm.head } else { &mut bm };
        finish_step(&mut st, trainable, cfg, step, batch_loss, log)?;
    }

    save_checkpoint(
        out,
        CheckpointKind::Bbox,
        cfg.steps as u64,
        Some(cfg),
        &mut bm.model,
        Some(("bbox", &mut bm.head)),
    )?;
    vocab.save(&vocab_sidecar(out))?;
    let outcome = FinetuneOutcome {
        initial_loss: st.initial_loss,
        final_loss: st.final_loss,
        checkpoint: out.to_path_buf(),
    };
    Ok((bm, outcome))
}

fn expect_kind(header: &CheckpointHeader, want: CheckpointKind, path: &Path) -> Result<()> {
    if header.kind != want {
        return Err(Error::mismatch(format!(
            "checkpoint {} has kind {}, expected {}",
            path.display(),
            header.kind.as_str(),
            want.as_str()
        )));
    }
    Ok(())
}

/// Loads a bare pretrained backbone, the starting point for fine-tuning.
pub fn load_pretext_model<F: Real>(path: &Path) -> Result<(CheckpointHeader, Model<F>)> {
    let (header, model, bag) = load_checkpoint::<F>(path)?;
    expect_kind(&header, CheckpointKind::Pretext, path)?;
    bag.finish()?;
    Ok((header, model))
}

pub fn load_affordance_model<F: Real>(path: &Path) -> Result<(CheckpointHeader, AffordanceModel<F>)> {
    let (header, model, mut bag) = load_checkpoint::<F>(path)?;
    expect_kind(&header, CheckpointKind::Affordance, path)?;
    let mut am = AffordanceModel::with_new_head(model, 0);
    bag.fill("affordance", &mut am.head)?;
    bag.finish()?;
    Ok((header, am))
}

pub fn load_action_model<F: Real>(path: &Path) -> Result<(CheckpointHeader, ActionModel<F>)> {
    let (header, model, mut bag) = load_checkpoint::<F>(path)?;
    expect_kind(&header, CheckpointKind::Action, path)?;
    let mut am = ActionModel::with_new_head(model, 0);
    bag.fill("action", &mut am.head)?;
    bag.finish()?;
    Ok((header, am))
}

pub fn load_bbox_model<F: Real>(path: &Path) -> Result<(CheckpointHeader, BboxModel<F>)> {
    let (header, model, mut bag) = load_checkpoint::<F>(path)?;
    expect_kind(&header, CheckpointKind::Bbox, path)?;
    let mut bm = BboxModel::with_new_head(model, 0);
    bag.fill("bbox", &mut bm.head)?;
    bag.finish()?;
    Ok((header, bm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::pretext::tests::{tiny_configs, tiny_corpus};
    use crate::training::CheckpointKind;

    fn fresh_model(seed: u64, vocab: &Vocabulary) -> Model<f32> {
        let (enc, text, fusion) = tiny_configs();
        Model::new(&mut rng_from_seed(seed), enc, text, fusion, vocab.len(), vocab.id()).unwrap()
    }

    fn train_cfg(steps: usize) -> TrainConfig {
        let mut cfg = TrainConfig::finetune();
        cfg.steps = steps;
        cfg.batch_size = 2;
        cfg.learning_rate = 3e-3;
        cfg
    }

    #[test]
    fn affordance_finetune_overfits_two_episodes() {
        let (eps, vocab) = tiny_corpus(2);
        let refs: Vec<&Episode> = eps.iter().collect();
        let model = fresh_model(1, &vocab);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("aff.ckpt");
        let (am, outcome) =
            finetune_affordance(&refs, &vocab, model, &train_cfg(40), &out, &mut |_| {}).unwrap();
        assert!(
            outcome.final_loss < outcome.initial_loss,
            "loss should fall: {} -> {}",
            outcome.initial_loss,
            outcome.final_loss
        );

        // Reloading reproduces inference bit for bit.
        let (header, loaded) = load_affordance_model::<f32>(&out).unwrap();
        assert_eq!(header.kind, CheckpointKind::Affordance);
        let ids = vocab.encode(&eps[0].instruction, 12).unwrap();
        let img = eps[0].start.to_array::<f32>();
        let (a, _) = am.infer(&img, &ids).unwrap();
        let (b, _) = loaded.infer(&img, &ids).unwrap();
        assert_eq!(a.pick, b.pick);
        assert_eq!(a.place, b.place);
    }

    #[test]
    fn action_finetune_reduces_loss() {
        let (eps, vocab) = tiny_corpus(2);
        let refs: Vec<&Episode> = eps.iter().collect();
        let model = fresh_model(2, &vocab);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("act.ckpt");
        let (am, outcome) =
            finetune_action(&refs, &vocab, model, &train_cfg(40), &out, &mut |_| {}).unwrap();
        assert!(outcome.final_loss < outcome.initial_loss);
        let (_, loaded) = load_action_model::<f32>(&out).unwrap();
        let ids = vocab.encode(&eps[1].instruction, 12).unwrap();
        let img = eps[1].start.to_array::<f32>();
        let (a, _) = am.infer(&img, &ids).unwrap();
        let (b, _) = loaded.infer(&img, &ids).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), crate::heads::ACTION_DIM);
    }

    #[test]
    fn bbox_finetune_reduces_loss_and_stays_in_unit_square() {
        let (eps, vocab) = tiny_corpus(2);
        let refs: Vec<&Episode> = eps.iter().collect();
        let model = fresh_model(3, &vocab);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("box.ckpt");
        let (bm, outcome) =
            finetune_bbox(&refs, &vocab, model, &train_cfg(40), &out, &mut |_| {}).unwrap();
        assert!(outcome.final_loss < outcome.initial_loss);
        let (_, loaded) = load_bbox_model::<f32>(&out).unwrap();
        let ids = vocab.encode(&eps[0].instruction, 12).unwrap();
        let img = eps[0].start.to_array::<f32>();
        let (a, _) = bm.infer(&img, &ids).unwrap();
        let (b, _) = loaded.infer(&img, &ids).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
    }

    #[test]
    fn frozen_backbone_leaves_model_weights_untouched() {
        let (eps, vocab) = tiny_corpus(2);
        let refs: Vec<&Episode> = eps.iter().collect();
        let mut model = fresh_model(4, &vocab);
        let mut before: Vec<(String, Vec<f32>)> = Vec::new();
        model.visit_params("", &mut |name, p| {
            before.push((name.to_string(), p.value().to_vec()));
        });
        let mut cfg = train_cfg(5);
        cfg.freeze_backbone = true;
        let dir = tempfile::tempdir().unwrap();
        let (mut am, _) = finetune_affordance(
            &refs,
            &vocab,
            model,
            &cfg,
            &dir.path().join("aff.ckpt"),
            &mut |_| {},
        )
        .unwrap();
        let mut after: Vec<(String, Vec<f32>)> = Vec::new();
        am.model.visit_params("", &mut |name, p| {
            after.push((name.to_string(), p.value().to_vec()));
        });
        assert_eq!(before, after, "frozen backbone must stay bit-identical");

        let mut head_changed = false;
        let mut fresh = AffordanceModel::with_new_head(am.model.clone(), cfg.seed);
        am.head.visit_params("", &mut |name, p| {
            let got = p.value().to_vec();
            fresh.head.visit_params("", &mut |n2, q| {
                if n2 == name && q.value() != got.as_slice() {
                    head_changed = true;
                }
            });
        });
        assert!(head_changed, "head weights must move away from their init");
    }

    #[test]
    fn loaders_reject_kind_mixups() {
        let (eps, vocab) = tiny_corpus(2);
        let refs: Vec<&Episode> = eps.iter().collect();
        let model = fresh_model(1, &vocab);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("aff.ckpt");
        finetune_affordance(&refs, &vocab, model, &train_cfg(2), &out, &mut |_| {}).unwrap();
        assert!(load_action_model::<f32>(&out).is_err());
        assert!(load_bbox_model::<f32>(&out).is_err());
    }
}
