//! Symmetric InfoNCE, AdamW, warmup-cosine learning rate, early stopping,
//! and the training loop with caption sampling and swap-based hard
//! negatives.

mod check;
mod early_stop;
mod loss;
mod optim;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use check::composite_grad_check;
pub use early_stop::{EarlyStopping, StopDecision};
pub use loss::{apply_hard_negatives, info_nce, info_nce_loss, info_nce_split};
pub use optim::{adamw_step, lr_at, AdamHyper, OptimizerState};
pub use trainer::{embed_texts, train, train_with, validation_loss, EpochLog, TrainData, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub temperature: f64,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub early_stop_patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Also use swapped captions in the text-to-audio (column) terms.
    pub hard_negatives_both_directions: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            temperature: 0.03,
            peak_lr: 1e-3,
            weight_decay: 0.05,
            warmup_epochs: 5,
            max_epochs: 100,
            batch_size: 64,
            early_stop_patience: 10,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            hard_negatives_both_directions: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("train.{field}"), msg))
            }
        };
        check(self.temperature > 0.0, "temperature", "must be > 0")?;
        check(self.peak_lr > 0.0, "peak_lr", "must be > 0")?;
        check(self.weight_decay >= 0.0, "weight_decay", "must be >= 0")?;
        check(self.early_stop_patience >= 1, "early_stop_patience", "must be >= 1")?;
        check(self.batch_size >= 2, "batch_size", "must be >= 2")?;
        check(self.max_epochs >= 1, "max_epochs", "must be >= 1")?;
        check((0.0..1.0).contains(&self.beta1), "beta1", "must be in [0, 1)")?;
        check((0.0..1.0).contains(&self.beta2), "beta2", "must be in [0, 1)")?;
        check(self.adam_eps > 0.0, "adam_eps", "must be > 0")?;
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}
