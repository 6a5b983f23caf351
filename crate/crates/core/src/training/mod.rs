//! Pretraining: variational initial state, loss, Adam and gradient checks.

mod fit;
mod gradcheck;
mod loss;
mod optim;


use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use fit::{fit, train, write_train_log, EpochLog, Objective, Pretrain, TrainReport};
pub use gradcheck::{grad_check, sample_coordinates, GradCheckReport};
pub use loss::{
    compute_loss, kl_divergence, loss_graph, sample_latent, standard_normal, LatentInit, LatentMode, LossBreakdown,
    LossVars, Target,
};
pub use optim::{clip_global_norm, Adam};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the KL term; zero disables it.
    pub beta_kl: f64,
    pub lambda_lb: f64,
    pub seed: u64,
    /// Global gradient-norm cap; zero disables clipping.
    pub grad_clip_norm: f64,
    /// Write a checkpoint every this many epochs; zero writes only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            epochs: 200,
            beta_kl: 1e-3,
            lambda_lb: 1e-2,
            seed: 0,
            grad_clip_norm: 1.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("Adam moments must lie in (0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.beta_kl >= 0.0 && self.lambda_lb >= 0.0 && self.grad_clip_norm >= 0.0) {
            return bad("loss weights and clip norm must be non-negative");
        }
        Ok(())
    }
}
