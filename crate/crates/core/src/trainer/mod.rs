//! CosMix training: batch composition with mixup, the mixup and contrastive
//! losses, Adam with step decay, the epoch loop and evaluation.

mod batch;
mod eval;
mod loss;
mod optim;
mod train;

pub use batch::{compose_batch, BatchKey, MixedBatch};
pub use eval::{embeddings, evaluate, export_embeddings, ConfusionMatrix, EvalReport, FeatureCache};
pub use loss::{
    lambda_weight, loss_cos, loss_mix, target_projection, total_loss, total_loss_with_projections, BatchTargets, ContrastiveWeights, LossParts, LossSettings,
};
pub use optim::{adam_step, lr_at_epoch, AdamState};
pub use train::{train, BatchLoss, TrainOutcome, Trainer};

use serde::{Deserialize, Serialize};

use crate::augment::BetaParams;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsLoss {
    SoftmaxCe,
    SigmoidBce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// No mixup, no contrastive term.
    Baseline,
    /// Mixup with the classification loss only.
    Mixup,
    /// Mixup plus the weighted contrastive term.
    Cosmix,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "mixup" => Ok(Mode::Mixup),
            "cosmix" => Ok(Mode::Cosmix),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode `{other}` (expected baseline, mixup or cosmix)"
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Mixup => "mixup",
            Mode::Cosmix => "cosmix",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: u32,
    pub lr0: f64,
    pub decay_rate: f64,
    pub decay_every: u32,
    pub decay_start_epoch: u32,
    pub decay_end_epoch: u32,
    /// Weight of the contrastive term.
    pub beta_penalty: f64,
    pub beta_params: BetaParams,
    pub cls_loss: ClsLoss,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub eval_batch_size: usize,
    /// Write wall-clock seconds into the metrics stream. Off by default so
    /// that identical runs produce identical streams.
    pub record_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            epochs: 70,
            lr0: 5e-3,
            decay_rate: 0.85,
            decay_every: 4,
            decay_start_epoch: 5,
            decay_end_epoch: 70,
            beta_penalty: 0.5,
            beta_params: BetaParams::default(),
            cls_loss: ClsLoss::SoftmaxCe,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            eval_batch_size: 256,
            record_wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return fail("train.epochs must be >= 1".into());
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return fail("batch sizes must be >= 1".into());
        }
        if !(self.beta_penalty >= 0.0) {
            return fail(format!("train.beta_penalty {} must be >= 0", self.beta_penalty));
        }
        if !(self.lr0 > 0.0) || !(self.decay_rate > 0.0) || self.decay_every == 0 {
            return fail("learning-rate schedule values must be positive".into());
        }
        self.beta_params
            .validate()
            .map_err(|e| Error::Config(format!("train.beta_params: {e}")))
    }

    /// The configuration a mode actually trains with.
    pub fn for_mode(&self, mode: Mode) -> TrainConfig {
        let mut cfg = self.clone();
        match mode {
            Mode::Baseline => {
                cfg.beta_params.mix_ratio = 0.0;
                cfg.beta_penalty = 0.0;
            }
            Mode::Mixup => cfg.beta_penalty = 0.0,
            Mode::Cosmix => {}
        }
        cfg
    }
}

/// Per-epoch summary; field names are those of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub loss_mix: f64,
    /// Mean of `beta * sum_r Lambda_r * L_cos`.
    pub loss_cos: f64,
    pub loss_total: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub seconds: f64,
}

impl EpochMetrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes") + "\n"
    }
}
