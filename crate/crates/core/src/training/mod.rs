//! Optimiser, schedules, the two training stages and self-training.

mod augment;
mod optim;
mod runner;
mod selftrain;
mod stages;

use serde::{Deserialize, Serialize};

pub use augment::{apply_op, augment_heavy, AugmentOp, AUGMENT_OPS};
pub use optim::{adamw_step, cosine_lr, OptimizerState};
pub use runner::EpochLog;
pub(crate) use runner::optimize as optimize_items;
pub use selftrain::{noisy_student_loop, pseudo_label, IterationLog, NoisyStudentConfig, NoisyStudentOutput};
pub use stages::{
    fusion_eval, init_stage2, stage1_predictions, train_stage1, train_stage2, FeatureCache, Stage1Head,
    TrainOutput, Validation,
};

pub use crate::model::{checkpoint_bytes, load_checkpoint, load_checkpoint_bytes, save_checkpoint, Dtype};

use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossMode,
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub margin: f64,
    /// Maximum stochastic-depth rate, scaled linearly by layer depth.
    pub drop_path: f64,
    /// Random horizontal flips.
    pub flip: bool,
    /// Two random ops per sample from flip / noise / erase / brightness.
    pub heavy_augment: bool,
    /// Shuffle real views before fusion.
    pub shuffle_views: bool,
    /// Flip-averaged validation predictions.
    pub tta: bool,
    /// Validate after every epoch rather than only after the last.
    pub validate_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            weight_decay: 1e-2,
            batch_size: 16,
            epochs: 10,
            seed: 0,
            loss: LossMode::Combined,
            gamma_pos: 1.0,
            gamma_neg: 4.0,
            margin: 0.05,
            drop_path: 0.1,
            flip: true,
            heavy_augment: false,
            shuffle_views: true,
            tta: true,
            validate_every_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return bad(format!("drop_path {} outside [0, 1)", self.drop_path));
        }
        Ok(())
    }

    pub fn loss_config(&self, rho: Vec<f64>) -> LossConfig {
        LossConfig {
            gamma_pos: self.gamma_pos,
            gamma_neg: self.gamma_neg,
            margin: self.margin,
            rho,
            mode: self.loss,
        }
    }
}
