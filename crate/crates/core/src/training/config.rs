use serde::{Deserialize, Serialize};

use crate::backbone::{HeadKind, ModelConfig};
use crate::error::{config, Result};

/// Optimization and sampling settings of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    /// Shortest context window in points.
    pub min_context: usize,
    /// Longest context window in points.
    pub max_context: usize,
    pub objective: HeadKind,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults sized for `model`: windows from `P + F` up to `T_max`.
    pub fn for_model(model: &ModelConfig) -> Self {
        TrainConfig {
            batch_size: 16,
            steps: 1000,
            lr_peak: 1e-3,
            warmup_steps: 100,
            weight_decay: 0.1,
            grad_clip_norm: 1.0,
            min_context: model.patch_len + model.horizon,
            max_context: model.max_context,
            objective: model.head,
            seed: 0,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config("batch_size must be positive"));
        }
        if self.min_context < model.patch_len + model.horizon {
            return Err(config(format!(
                "min_context {} is below patch_len + horizon = {}",
                self.min_context,
                model.patch_len + model.horizon
            )));
        }
        if self.max_context > model.max_context {
            return Err(config(format!(
                "max_context {} exceeds the model limit {}",
                self.max_context, model.max_context
            )));
        }
        if self.min_context > self.max_context {
            return Err(config("min_context exceeds max_context"));
        }
        if !(self.lr_peak >= 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip_norm > 0.0) {
            return Err(config("lr_peak and weight_decay must be non-negative, grad_clip_norm positive"));
        }
        if self.objective != model.head {
            return Err(config(format!(
                "objective {} does not match the model head {}",
                self.objective, model.head
            )));
        }
        Ok(())
    }
}
