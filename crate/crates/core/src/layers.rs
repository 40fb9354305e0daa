//! Parameterized building blocks shared by the backbone and the heads.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Anything owning named trainable tensors.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn named_params(m: &dyn Module) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

pub fn param_count(m: &dyn Module) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, t| n += t.numel());
    n
}

/// Normal draws truncated to two standard deviations.
pub fn trunc_normal<R: Rng + ?Sized>(n: usize, std: f32, rng: &mut R) -> Vec<f32> {
    (0..n)
        .map(|_| loop {
            let z: f32 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect()
}

/// `y = x·W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, bias: bool, std: f32, rng: &mut R) -> Self {
        let weight = Tensor::param(trunc_normal(d_in * d_out, std, rng), &[d_in, d_out]).unwrap();
        let bias = bias.then(|| Tensor::param(vec![0.0; d_out], &[d_out]).unwrap());
        Linear { weight, bias }
    }

    pub fn zeros(d_in: usize, d_out: usize, bias: bool) -> Self {
        Linear {
            weight: Tensor::param(vec![0.0; d_in * d_out], &[d_in, d_out]).unwrap(),
            bias: bias.then(|| Tensor::param(vec![0.0; d_out], &[d_out]).unwrap()),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Layer normalization with learned gain and offset.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub offset: Tensor,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gain: Tensor::param(vec![1.0; d], &[d]).unwrap(),
            offset: Tensor::param(vec![0.0; d], &[d]).unwrap(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(LN_EPS).mul(&self.gain)?.add(&self.offset)
    }
}

impl Module for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "gain"), &self.gain);
        f(&join(prefix, "offset"), &self.offset);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "offset"), &mut self.offset);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn truncation_bounds_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = trunc_normal(10_000, 0.02, &mut rng);
        assert!(w.iter().all(|v| v.abs() <= 0.04 + 1e-7));
    }

    #[test]
    fn linear_broadcasts_over_batch_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new(4, 3, true, 0.5, &mut rng);
        let x = Tensor::randn(&[2, 5, 4], 1.0, &mut rng);
        assert_eq!(lin.forward(&x).unwrap().shape(), &[2, 5, 3]);
        assert_eq!(param_count(&lin), 15);
    }
}
