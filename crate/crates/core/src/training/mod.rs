//! Optimization: losses, AdamW, schedules, checkpoints, training loops, and a
//! finite-difference gradient checker.

pub mod checkpoint;
pub mod finetune;
pub mod gradcheck;
pub mod loss;
pub mod optim;
pub mod pretext;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which prediction targets contribute to the reconstruction loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    /// Every goal patch, masked or not.
    AllPatches,
    /// Only patches hidden by the mask.
    MaskedOnly,
}

/// Hyperparameters for one training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Fraction of steps spent in linear warmup before cosine decay.
    pub warmup_frac: f64,
    /// Global gradient norm ceiling.
    pub clip_norm: f64,
    /// Goal-image mask ratio; fine-tuning runs force 1.0.
    pub mask_ratio: f64,
    pub loss_scope: LossScope,
    /// Fine-tuning only: update just the head, leaving backbone weights
    /// bit-identical. Ignored by the pretext loop.
    #[serde(default)]
    pub freeze_backbone: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// Masked goal-prediction pretext defaults.
    pub fn pretext() -> TrainConfig {
        TrainConfig {
            steps: 3000,
            batch_size: 8,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            warmup_frac: 0.05,
            clip_norm: 1.0,
            mask_ratio: 0.95,
            loss_scope: LossScope::AllPatches,
            freeze_backbone: false,
            seed: 0,
        }
    }

    /// Downstream head fine-tuning defaults.
    pub fn finetune() -> TrainConfig {
        TrainConfig {
            steps: 600,
            batch_size: 8,
            learning_rate: 5e-5,
            weight_decay: 0.01,
            warmup_frac: 0.05,
            clip_norm: 1.0,
            mask_ratio: 1.0,
            loss_scope: LossScope::AllPatches,
            freeze_backbone: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::invalid("steps and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) || self.warmup_frac.is_nan() {
            return Err(Error::invalid("warmup_frac must lie in [0, 1]"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::invalid("clip_norm must be positive"));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) || self.mask_ratio.is_nan() {
            return Err(Error::invalid("mask_ratio must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        ((self.steps as f64) * self.warmup_frac).round() as usize
    }
}

/// One line of training telemetry, serialized as JSONL by callers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub use checkpoint::{
    load_checkpoint, save_checkpoint, sha256_file, CheckpointHeader, CheckpointKind, TensorBag,
};
pub use finetune::{
    finetune_action, finetune_affordance, finetune_bbox, load_action_model, load_affordance_model,
    load_bbox_model, load_pretext_model, ActionModel, AffordanceModel, BboxModel, FinetuneOutcome,
};
pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport};
pub use loss::{action_loss, action_target, affordance_loss, bbox_loss, pretext_loss};
pub use optim::{clip_grad_norm, lr_multiplier, AdamW};
pub use pretext::{train_pretext, PretextOutcome};

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_validate() {
        TrainConfig::pretext().validate().unwrap();
        TrainConfig::finetune().validate().unwrap();
        assert_eq!(TrainConfig::pretext().warmup_steps(), 150);
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut c = TrainConfig::pretext();
        c.steps = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::pretext();
        c.mask_ratio = 1.5;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::pretext();
        c.learning_rate = -1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::pretext();
        c.clip_norm = 0.0;
        assert!(c.validate().is_err());
    }
}
