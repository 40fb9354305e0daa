//! Patch embedding, backbone and prediction head assembled into one model.

use rand::{Rng, RngCore};

use crate::backbone::{Backbone, HeadKind, KVCache, ModelConfig};
use crate::error::{Error, Result};
use crate::layers::{join, param_count, Module};
use crate::tensor::Tensor;
use crate::timeflow::diffusion::{diffusion_loss, diffusion_sample, Schedule};
use crate::timeflow::mse::{mse_loss, MlpHead};
use crate::timeflow::{repeat_condition, sample_ensemble, timeflow_loss, FMNet, TIME_FEATURES};
use crate::tokenizer::{Patches, PatchEmbed, SeriesSample};

#[derive(Clone, Debug)]
pub enum Head {
    TimeFlow(FMNet),
    Mse(MlpHead),
    Diffusion(FMNet),
}

impl Head {
    pub fn kind(&self) -> HeadKind {
        match self {
            Head::TimeFlow(_) => HeadKind::TimeFlow,
            Head::Mse(_) => HeadKind::Mse,
            Head::Diffusion(_) => HeadKind::Diffusion,
        }
    }
}

impl Module for Head {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            Head::TimeFlow(n) | Head::Diffusion(n) => n.visit(prefix, f),
            Head::Mse(m) => m.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            Head::TimeFlow(n) | Head::Diffusion(n) => n.visit_mut(prefix, f),
            Head::Mse(m) => m.visit_mut(prefix, f),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SundialModel {
    pub config: ModelConfig,
    pub embed: PatchEmbed,
    pub backbone: Backbone,
    pub head: Head,
    schedule: Schedule,
}

impl SundialModel {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let embed = PatchEmbed::new(cfg.patch_len, cfg.d_model, 0.02, rng);
        let backbone = Backbone::new(cfg, rng);
        let head = match cfg.head {
            HeadKind::TimeFlow => Head::TimeFlow(FMNet::new(cfg, rng)),
            HeadKind::Mse => Head::Mse(MlpHead::new(cfg, rng)),
            HeadKind::Diffusion => Head::Diffusion(FMNet::new(cfg, rng)),
        };
        Ok(SundialModel {
            config: cfg.clone(),
            embed,
            backbone,
            head,
            schedule: Schedule::default(),
        })
    }

    /// Parameter total implied by `cfg` without allocating the model.
    pub fn count_params(cfg: &ModelConfig) -> usize {
        let (p, d, ff, w, f) = (cfg.patch_len, cfg.d_model, cfg.d_ff, cfg.flow_dim, cfg.horizon);
        let embed = 2 * p * d + d + d * d + d;
        let layer = 4 * d * d + 4 * d + 2 * (d * ff + ff) + ff * d + d;
        let final_norm = if cfg.pre_ln { 2 * d } else { 0 };
        let head = match cfg.head {
            HeadKind::Mse => d * w + w + w * f + f,
            HeadKind::TimeFlow | HeadKind::Diffusion => {
                let block = 3 * w * w + 3 * w + 2 * (w * w + w);
                TIME_FEATURES * w + w + w * w + w + d * w + w + f * w + w
                    + cfg.flow_blocks * block
                    + 2 * w * w + 2 * w
                    + w * f + f
            }
        };
        embed + cfg.layers * layer + final_norm + head
    }

    pub fn param_count(&self) -> usize {
        param_count(self)
    }

    /// Backbone forward passes run so far.
    pub fn backbone_calls(&self) -> usize {
        self.backbone.calls()
    }

    pub fn embed_patches(&self, patches: &Patches) -> Result<Tensor> {
        self.embed.forward(patches)
    }

    /// Final-layer representations `[N, D]` of a prepared sample.
    pub fn encode(&self, sample: &SeriesSample) -> Result<Tensor> {
        if sample.len() > self.config.max_context {
            return Err(Error::Input(format!(
                "context of {} points exceeds the limit of {}",
                sample.len(),
                self.config.max_context
            )));
        }
        self.backbone.forward(&self.embed_patches(&sample.patches)?)
    }

    pub fn new_cache(&self) -> KVCache {
        self.backbone.new_cache()
    }

    /// Embeds and appends whole patches to `cache`, returning their
    /// representations `[n, D]`.
    pub fn encode_incremental(&self, patches: &Patches, cache: &mut KVCache) -> Result<Tensor> {
        self.backbone.forward_incremental(&self.embed_patches(patches)?, cache)
    }

    /// Training objective of the configured head on representations
    /// `h [M, D]` and normalized targets `y [M, F]`.
    pub fn loss<R: Rng + ?Sized>(&self, h: &Tensor, y: &Tensor, rng: &mut R) -> Result<Tensor> {
        match &self.head {
            Head::TimeFlow(net) => timeflow_loss(net, h, y, rng),
            Head::Mse(mlp) => mse_loss(&mlp.forward(h)?, y),
            Head::Diffusion(net) => diffusion_loss(net, &self.schedule, h, y, rng),
        }
    }

    /// `[S, F]` normalized forecasts from one representation `h [D]`.
    /// The point head repeats its single prediction.
    pub fn generate<R: RngCore + ?Sized>(&self, h: &Tensor, members: usize, steps: usize, rng: &mut R) -> Result<Tensor> {
        match &self.head {
            Head::TimeFlow(net) => sample_ensemble(net, h, members, steps, rng),
            Head::Mse(mlp) => {
                if members == 0 {
                    return Err(crate::error::config("ensemble size must be positive"));
                }
                crate::tensor::no_grad(|| mlp.forward(&repeat_condition(h, members)?))
            }
            Head::Diffusion(net) => diffusion_sample(net, &self.schedule, h, members, steps, rng),
        }
    }
}

impl Module for SundialModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.embed.visit(&join(prefix, "embed"), f);
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
