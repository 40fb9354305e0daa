use rand::Rng;

use crate::backbone::ModelConfig;
use crate::error::Result;
use crate::layers::{join, Linear, Module, LN_EPS};
use crate::tensor::{shape_err, Tensor};

/// Number of sinusoidal features describing the flow time.
pub const TIME_FEATURES: usize = 64;
/// Flow times in `[0, 1]` are stretched by this factor before the sinusoids.
pub const TIME_SCALE: f64 = 1000.0;
const MAX_PERIOD: f64 = 10_000.0;

/// Something that maps `(y_t [B,F], t [B], h [B,D])` to a `[B,F]` output.
pub trait VelocityField {
    fn forward(&self, y_t: &Tensor, t: &Tensor, h: &Tensor) -> Result<Tensor>;
    fn horizon(&self) -> usize;
}

/// `[cos(t·ω₀..), sin(t·ω₀..)]` features, `[B, 64]`.
pub fn time_features(t: &[f32]) -> Result<Tensor> {
    let half = TIME_FEATURES / 2;
    let mut out = Vec::with_capacity(t.len() * TIME_FEATURES);
    for &ti in t {
        let arg = ti as f64 * TIME_SCALE;
        let row: Vec<f64> = (0..half)
            .map(|i| arg * (-(MAX_PERIOD.ln()) * i as f64 / half as f64).exp())
            .collect();
        out.extend(row.iter().map(|a| a.cos() as f32));
        out.extend(row.iter().map(|a| a.sin() as f32));
    }
    Tensor::from_vec(out, &[t.len(), TIME_FEATURES])
}

/// Residual MLP block modulated by the condition: normalization shifted and
/// scaled, residual branch gated.
#[derive(Clone, Debug)]
pub struct FlowBlock {
    pub modulation: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FlowBlock {
    fn new<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        let std = 1.0 / (width as f32).sqrt();
        FlowBlock {
            modulation: Linear::zeros(width, 3 * width, true),
            fc1: Linear::new(width, width, true, std, rng),
            fc2: Linear::new(width, width, true, std, rng),
        }
    }

    /// `x`: `[B, W]`, `cond`: activated condition `[B, W]`.
    pub fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let w = x.shape()[1];
        let m = self.modulation.forward(cond)?;
        let shift = m.narrow(1, 0, w)?;
        let scale = m.narrow(1, w, w)?;
        let gate = m.narrow(1, 2 * w, w)?;
        let u = x.layer_norm(LN_EPS).mul(&scale.add_scalar(1.0))?.add(&shift)?;
        let u = self.fc2.forward(&self.fc1.forward(&u)?.silu())?;
        x.add(&gate.mul(&u)?)
    }
}

impl Module for FlowBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.modulation.visit(&join(prefix, "modulation"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.modulation.visit_mut(&join(prefix, "modulation"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Small conditional network predicting an `F`-dimensional output from a
/// noisy `F`-vector, a flow time and a backbone representation.
#[derive(Clone, Debug)]
pub struct FMNet {
    pub time_hidden: Linear,
    pub time_out: Linear,
    pub cond: Linear,
    pub input: Linear,
    pub blocks: Vec<FlowBlock>,
    pub final_modulation: Linear,
    pub output: Linear,
}

impl FMNet {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let (w, f, d) = (cfg.flow_dim, cfg.horizon, cfg.d_model);
        let std = |fan_in: usize| 1.0 / (fan_in as f32).sqrt();
        FMNet {
            time_hidden: Linear::new(TIME_FEATURES, w, true, std(TIME_FEATURES), rng),
            time_out: Linear::new(w, w, true, std(w), rng),
            cond: Linear::new(d, w, true, std(d), rng),
            input: Linear::new(f, w, true, std(f), rng),
            blocks: (0..cfg.flow_blocks).map(|_| FlowBlock::new(w, rng)).collect(),
            final_modulation: Linear::zeros(w, 2 * w, true),
            output: Linear::zeros(w, f, true),
        }
    }

    pub fn width(&self) -> usize {
        self.input.d_out()
    }

    /// SiLU of time embedding plus projected representation, `[B, W]`.
    pub fn condition(&self, t: &Tensor, h: &Tensor) -> Result<Tensor> {
        let temb = self.time_out.forward(&self.time_hidden.forward(&time_features(t.data())?)?.silu())?;
        Ok(temb.add(&self.cond.forward(h)?)?.silu())
    }
}

impl VelocityField for FMNet {
    fn forward(&self, y_t: &Tensor, t: &Tensor, h: &Tensor) -> Result<Tensor> {
        let b = y_t.shape()[0];
        if y_t.rank() != 2 || y_t.shape()[1] != self.horizon() || t.numel() != b || h.shape()[0] != b {
            return Err(shape_err("fmnet", y_t.shape(), h.shape()));
        }
        let c = self.condition(t, h)?;
        let mut x = self.input.forward(y_t)?;
        for block in &self.blocks {
            x = block.forward(&x, &c)?;
        }
        let w = self.width();
        let m = self.final_modulation.forward(&c)?;
        let shift = m.narrow(1, 0, w)?;
        let scale = m.narrow(1, w, w)?;
        let x = x.layer_norm(LN_EPS).mul(&scale.add_scalar(1.0))?.add(&shift)?;
        self.output.forward(&x)
    }

    fn horizon(&self) -> usize {
        self.output.d_out()
    }
}

impl Module for FMNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.time_hidden.visit(&join(prefix, "time_hidden"), f);
        self.time_out.visit(&join(prefix, "time_out"), f);
        self.cond.visit(&join(prefix, "cond"), f);
        self.input.visit(&join(prefix, "input"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.final_modulation.visit(&join(prefix, "final_modulation"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.time_hidden.visit_mut(&join(prefix, "time_hidden"), f);
        self.time_out.visit_mut(&join(prefix, "time_out"), f);
        self.cond.visit_mut(&join(prefix, "cond"), f);
        self.input.visit_mut(&join(prefix, "input"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.final_modulation.visit_mut(&join(prefix, "final_modulation"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}
