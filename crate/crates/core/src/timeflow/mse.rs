//! Deterministic point-forecast head trained with squared error.

use rand::Rng;

use super::no_targets;
use crate::backbone::ModelConfig;
use crate::error::Result;
use crate::layers::{join, Linear, Module};
use crate::tensor::Tensor;

/// `D → D_tf → F` MLP with a SiLU in between.
#[derive(Clone, Debug)]
pub struct MlpHead {
    pub hidden: Linear,
    pub output: Linear,
}

impl MlpHead {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        MlpHead {
            hidden: Linear::new(cfg.d_model, cfg.flow_dim, true, 1.0 / (cfg.d_model as f32).sqrt(), rng),
            output: Linear::new(cfg.flow_dim, cfg.horizon, true, 1.0 / (cfg.flow_dim as f32).sqrt(), rng),
        }
    }

    pub fn horizon(&self) -> usize {
        self.output.d_out()
    }

    /// `[B, D]` → `[B, F]`
    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        self.output.forward(&self.hidden.forward(h)?.silu())
    }
}

impl Module for MlpHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// Mean squared error between `pred [M,F]` and `y [M,F]`.
pub fn mse_loss(pred: &Tensor, y: &Tensor) -> Result<Tensor> {
    if y.shape()[0] == 0 {
        return Err(no_targets());
    }
    Ok(pred.sub(y)?.square().mean_all())
}
