//! Decoder-only Transformer over patch tokens.

mod attention;
mod cache;
mod config;

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

pub use attention::{blocked_attention, dense_attention, rope_scores, Attention, ATTENTION_BLOCK};
pub use cache::{KVCache, LayerCache};
pub use config::{HeadKind, ModelConfig};

use crate::error::{Error, Result};
use crate::layers::{join, LayerNorm, Linear, Module};
use crate::tensor::Tensor;

/// Gated GELU feed-forward: `down(gelu(gate·x) ⊙ up·x)`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub gate: Linear,
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let residual_std = 0.02 / (2.0 * cfg.layers as f32).sqrt();
        FeedForward {
            gate: Linear::new(cfg.d_model, cfg.d_ff, true, 0.02, rng),
            up: Linear::new(cfg.d_model, cfg.d_ff, true, 0.02, rng),
            down: Linear::new(cfg.d_ff, cfg.d_model, true, residual_std, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let hidden = self.gate.forward(x)?.gelu().mul(&self.up.forward(x)?)?;
        self.down.forward(&hidden)
    }
}

impl Module for FeedForward {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.gate.visit(&join(prefix, "gate"), f);
        self.up.visit(&join(prefix, "up"), f);
        self.down.visit(&join(prefix, "down"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.gate.visit_mut(&join(prefix, "gate"), f);
        self.up.visit_mut(&join(prefix, "up"), f);
        self.down.visit_mut(&join(prefix, "down"), f);
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub attn_norm: LayerNorm,
    pub attn: Attention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        Block {
            attn_norm: LayerNorm::new(cfg.d_model),
            attn: Attention::new(cfg, rng),
            ffn_norm: LayerNorm::new(cfg.d_model),
            ffn: FeedForward::new(cfg, rng),
        }
    }

    pub fn forward(
        &self,
        x: &Tensor,
        positions: &[usize],
        cfg: &ModelConfig,
        cache: Option<&mut LayerCache>,
    ) -> Result<Tensor> {
        if cfg.pre_ln {
            let x = x.add(&self.attn.forward(&self.attn_norm.forward(x)?, positions, cfg, cache)?)?;
            x.add(&self.ffn.forward(&self.ffn_norm.forward(&x)?)?)
        } else {
            let x = self.attn_norm.forward(&x.add(&self.attn.forward(x, positions, cfg, cache)?)?)?;
            self.ffn_norm.forward(&x.add(&self.ffn.forward(&x)?)?)
        }
    }
}

impl Module for Block {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.attn_norm.visit(&join(prefix, "attn_norm"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.ffn_norm.visit(&join(prefix, "ffn_norm"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.attn_norm.visit_mut(&join(prefix, "attn_norm"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ffn_norm.visit_mut(&join(prefix, "ffn_norm"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

/// Stack of blocks over embedded tokens. A final normalization follows the
/// last block when pre-normalization is used.
#[derive(Debug)]
pub struct Backbone {
    pub config: ModelConfig,
    pub blocks: Vec<Block>,
    pub final_norm: Option<LayerNorm>,
    calls: AtomicUsize,
}

impl Clone for Backbone {
    fn clone(&self) -> Self {
        Backbone {
            config: self.config.clone(),
            blocks: self.blocks.clone(),
            final_norm: self.final_norm.clone(),
            calls: AtomicUsize::new(0),
        }
    }
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        Backbone {
            config: cfg.clone(),
            blocks: (0..cfg.layers).map(|_| Block::new(cfg, rng)).collect(),
            final_norm: cfg.pre_ln.then(|| LayerNorm::new(cfg.d_model)),
            calls: AtomicUsize::new(0),
        }
    }

    /// Number of forward passes run so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn new_cache(&self) -> KVCache {
        KVCache::new(self.blocks.len(), self.config.max_tokens())
    }

    fn run(&self, x: &Tensor, positions: &[usize], mut cache: Option<&mut KVCache>) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut h = x.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            let layer = cache.as_deref_mut().map(|c| c.layer_mut(i));
            h = block.forward(&h, positions, &self.config, layer)?;
        }
        match &self.final_norm {
            Some(norm) => norm.forward(&h),
            None => Ok(h),
        }
    }

    fn check_width(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.shape()[1] != self.config.d_model {
            return Err(crate::tensor::shape_err("backbone", x.shape(), &[self.config.d_model]));
        }
        Ok(())
    }

    /// Representations `[N, D]` of embedded tokens `[N, D]` at positions `0..N`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_width(x)?;
        let n = x.shape()[0];
        if n > self.config.max_tokens() {
            return Err(Error::Input(format!(
                "{n} tokens exceed the context limit of {}",
                self.config.max_tokens()
            )));
        }
        let positions: Vec<usize> = (0..n).collect();
        self.run(x, &positions, None)
    }

    /// Appends embedded tokens `[n, D]` to `cache` and returns their
    /// representations; the oldest cached tokens slide out at capacity.
    pub fn forward_incremental(&self, x: &Tensor, cache: &mut KVCache) -> Result<Tensor> {
        self.check_width(x)?;
        if cache.n_layers() != self.blocks.len() {
            return Err(Error::State(format!(
                "cache has {} layers, model has {}",
                cache.n_layers(),
                self.blocks.len()
            )));
        }
        let n = x.shape()[0];
        let start = cache.next_position();
        let positions: Vec<usize> = (start..start + n).collect();
        let h = self.run(x, &positions, Some(cache))?;
        cache.advance(n);
        Ok(h)
    }
}

impl Module for Backbone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        if let Some(n) = &self.final_norm {
            n.visit(&join(prefix, "final_norm"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        if let Some(n) = &mut self.final_norm {
            n.visit_mut(&join(prefix, "final_norm"), f);
        }
    }
}
