//! Desk-scale training and evaluation pipeline.
//!
//! A synthetic composition dataset stands in for real cropping data: each
//! image carries one planted high-contrast subject, and an analytic oracle
//! scores every candidate view (subject coverage, rule-of-thirds placement,
//! truncation). A tiny convolutional backbone plus a 3-layer FC head scores
//! views either through one of the RoI kernels on shared full-image features
//! or by cropping and warping each view independently. The trainer runs
//! SGD with momentum under a listwise or pairwise loss; the ablation runner
//! compares losses and kernels on held-out rank correlation.

mod model;
mod synth;
mod train;

pub use model::{
    forward_score, model_loss, model_loss_and_grads, ConvLayer, FcLayer, ModelArch, ModelParams,
    ParamGrads,
};
pub use synth::{synth_generate, SynthConfig, SynthImage, ViewList};
pub use train::{
    ablation_to_csv, eval_rank_quality, eval_scored_lists, run_ablation, train, val_seed,
    AblationRow, AblationSpec, EpochLog, EvalReport, StepLog, ToyRunConfig, TrainLog, TrainOutcome,
};

use serde::{Deserialize, Serialize};

use crate::roi::RoiKind;

/// Ranking loss used by the trainer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Top-1 cross entropy over the whole list.
    Listwise,
    /// Hinge over every ordered pair.
    PairwiseAll,
    /// Hinge over pairs whose ground-truth score gap is at least the
    /// threshold.
    PairwiseThreshold(f64),
    /// Hinge over rank-adjacent pairs only.
    PairwiseAdjacent,
}

impl LossKind {
    pub fn name(&self) -> String {
        match self {
            LossKind::Listwise => "listwise".into(),
            LossKind::PairwiseAll => "pairwise_all".into(),
            LossKind::PairwiseThreshold(d) => format!("pairwise_threshold({d})"),
            LossKind::PairwiseAdjacent => "pairwise_adjacent".into(),
        }
    }
}

/// How per-view features reach the scoring head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoiMode {
    /// Crop the raw image per view and warp it to a fixed input size; the
    /// backbone runs once per view.
    None,
    Pool,
    Align,
    Warp,
    Refine,
}

impl RoiMode {
    pub fn kind(&self) -> Option<RoiKind> {
        match self {
            RoiMode::None => None,
            RoiMode::Pool => Some(RoiKind::Pool),
            RoiMode::Align => Some(RoiKind::Align),
            RoiMode::Warp => Some(RoiKind::Warp),
            RoiMode::Refine => Some(RoiKind::Refine),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RoiMode::None => "none",
            RoiMode::Pool => "pool",
            RoiMode::Align => "align",
            RoiMode::Warp => "warp",
            RoiMode::Refine => "refine",
        }
    }
}

/// Trainer hyperparameters. Defaults: 10 epochs of SGD at 0.001 with
/// momentum 0.9, a single x0.1 decay after epoch 4, batches of 8 view lists.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    /// Epoch after which the decay applies (0 disables).
    pub lr_decay_after_epochs: usize,
    pub momentum: f64,
    pub batch_lists: usize,
    pub rng_seed: u64,
    pub loss_kind: LossKind,
    pub roi_mode: RoiMode,
    /// Scale on the ordinal ground-truth scores fed to the listwise loss.
    pub gt_temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            learning_rate: 0.001,
            lr_decay_factor: 0.1,
            lr_decay_after_epochs: 4,
            momentum: 0.9,
            batch_lists: 8,
            rng_seed: 0,
            loss_kind: LossKind::Listwise,
            roi_mode: RoiMode::Refine,
            gt_temperature: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.learning_rate <= 0.0
            || self.lr_decay_factor <= 0.0
            || self.momentum < 0.0
            || self.momentum >= 1.0
            || self.batch_lists == 0
            || self.gt_temperature <= 0.0
        {
            return Err(crate::Error::invalid(format!("bad train config: {self:?}")));
        }
        Ok(())
    }
}
