use crate::error::{Error, Result};
use crate::layers::Module;
use crate::tensor::Tensor;

/// Linear warmup to `peak`, then cosine decay to `peak · floor`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
    pub floor: f64,
}

impl CosineSchedule {
    pub fn new(peak: f64, warmup: usize, total: usize) -> Self {
        CosineSchedule {
            peak,
            warmup,
            total,
            floor: 0.1,
        }
    }

    /// Learning rate at zero-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        let min = self.peak * self.floor;
        min + (self.peak - min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adaptive moments with decoupled weight decay. Decay applies to matrices
/// only; biases and normalization gains are left undecayed.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every parameter of `model` from its accumulated gradient
    /// (absent gradients count as zero), then clears the gradients.
    pub fn step(&mut self, model: &mut dyn Module, lr: f64, grad_scale: f64) -> Result<()> {
        self.step += 1;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (first, second) = (&mut self.first, &mut self.second);
        let mut k = 0;
        let mut failure = None;
        model.visit_mut("", &mut |name, t| {
            if failure.is_some() {
                return;
            }
            if first.len() <= k {
                first.push(vec![0.0; t.numel()]);
                second.push(vec![0.0; t.numel()]);
            }
            if first[k].len() != t.numel() {
                failure = Some(Error::State(format!("optimizer state does not match parameter {name}")));
                return;
            }
            let g = t.grad();
            let decay = if t.rank() >= 2 { wd } else { 0.0 };
            let mut data = t.to_vec();
            for (i, p) in data.iter_mut().enumerate() {
                let gi = g.as_ref().map_or(0.0, |g| g[i] as f64 * grad_scale);
                let m = &mut first[k][i];
                let v = &mut second[k][i];
                *m = b1 * *m + (1.0 - b1) * gi;
                *v = b2 * *v + (1.0 - b2) * gi * gi;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + eps) + decay * *p as f64;
                *p = (*p as f64 - lr * update) as f32;
            }
            *t = Tensor::param(data, t.shape()).expect("shape unchanged");
            k += 1;
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// Euclidean norm of all parameter gradients together.
pub fn global_grad_norm(model: &dyn Module) -> f64 {
    let mut sq = 0f64;
    model.visit("", &mut |_, t| {
        if let Some(g) = t.grad() {
            sq += g.iter().map(|&v| v as f64 * v as f64).sum::<f64>();
        }
    });
    sq.sqrt()
}

/// Factor bringing a gradient of norm `norm` within `max_norm`.
pub fn clip_scale(norm: f64, max_norm: f64) -> f64 {
    if norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}
