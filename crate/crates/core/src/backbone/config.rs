use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

/// Which prediction head sits on top of the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Conditional flow-matching network (the generative default).
    #[default]
    TimeFlow,
    /// Deterministic MLP trained with mean squared error.
    Mse,
    /// Noise-prediction network with a cosine DDPM schedule.
    Diffusion,
}

impl std::str::FromStr for HeadKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "timeflow" => Ok(HeadKind::TimeFlow),
            "mse" => Ok(HeadKind::Mse),
            "diffusion" => Ok(HeadKind::Diffusion),
            other => Err(config(format!("unknown objective {other:?}"))),
        }
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadKind::TimeFlow => "timeflow",
            HeadKind::Mse => "mse",
            HeadKind::Diffusion => "diffusion",
        })
    }
}

/// Every architectural hyperparameter plus the ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Points per patch token (`P`).
    pub patch_len: usize,
    /// Longest context in points (`T_max`).
    pub max_context: usize,
    /// Points generated per head call (`F`).
    pub horizon: usize,
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    /// Hidden width of the head network (`D_tf`).
    pub flow_dim: usize,
    /// Residual blocks in the head network (`L_tf`).
    pub flow_blocks: usize,
    /// Default number of Euler steps when sampling.
    pub sample_steps: usize,
    pub rope: bool,
    pub pre_ln: bool,
    pub kv_cache: bool,
    pub rope_base: f64,
    #[serde(default)]
    pub head: HeadKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    fn table(layers: usize, d_model: usize, heads: usize, flow_dim: usize, flow_blocks: usize) -> Self {
        ModelConfig {
            patch_len: 16,
            max_context: 2880,
            horizon: 720,
            layers,
            d_model,
            d_ff: 4 * d_model,
            heads,
            flow_dim,
            flow_blocks,
            sample_steps: 50,
            rope: true,
            pre_ln: true,
            kv_cache: true,
            rope_base: 10_000.0,
            head: HeadKind::TimeFlow,
        }
    }

    /// 32M-parameter published configuration.
    pub fn small() -> Self {
        Self::table(6, 512, 8, 512, 3)
    }

    /// 128M-parameter published configuration.
    pub fn base() -> Self {
        Self::table(12, 768, 12, 768, 3)
    }

    /// 444M-parameter published configuration.
    pub fn large() -> Self {
        Self::table(24, 1024, 16, 1024, 6)
    }

    /// Desk-scale model used by the end-to-end tests.
    pub fn toy() -> Self {
        ModelConfig {
            patch_len: 16,
            max_context: 512,
            horizon: 32,
            layers: 2,
            d_model: 64,
            d_ff: 128,
            heads: 4,
            flow_dim: 64,
            flow_blocks: 2,
            sample_steps: 50,
            rope: true,
            pre_ln: true,
            kv_cache: true,
            rope_base: 10_000.0,
            head: HeadKind::TimeFlow,
        }
    }

    /// Smallest configuration, used for gradient checking.
    pub fn tiny() -> Self {
        ModelConfig {
            patch_len: 4,
            max_context: 64,
            horizon: 4,
            layers: 1,
            d_model: 8,
            d_ff: 16,
            heads: 2,
            flow_dim: 8,
            flow_blocks: 1,
            sample_steps: 50,
            rope: true,
            pre_ln: true,
            kv_cache: true,
            rope_base: 10_000.0,
            head: HeadKind::TimeFlow,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Token capacity of a context window, `⌈T_max / P⌉`.
    pub fn max_tokens(&self) -> usize {
        self.max_context.div_ceil(self.patch_len)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch_len", self.patch_len),
            ("max_context", self.max_context),
            ("horizon", self.horizon),
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("heads", self.heads),
            ("flow_dim", self.flow_dim),
            ("flow_blocks", self.flow_blocks),
            ("sample_steps", self.sample_steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.rope && !self.head_dim().is_multiple_of(2) {
            return Err(config(format!(
                "rotary embedding needs an even head width, got {}",
                self.head_dim()
            )));
        }
        if !(self.rope_base > 0.0) {
            return Err(config("rope_base must be positive"));
        }
        Ok(())
    }

    /// Names of fields that differ from `other`.
    pub fn diff(&self, other: &ModelConfig) -> Vec<String> {
        let a = serde_json::to_value(self).expect("config serializes");
        let b = serde_json::to_value(other).expect("config serializes");
        let (a, b) = (a.as_object().unwrap(), b.as_object().unwrap());
        a.iter()
            .filter(|(k, v)| b.get(*k) != Some(v))
            .map(|(k, _)| k.clone())
            .collect()
    }
}
