use rand::Rng;

use super::cache::LayerCache;
use super::config::ModelConfig;
use crate::error::{config, Result};
use crate::layers::{join, Linear, Module};
use crate::tensor::{count_multiplies, grad_enabled, Tensor};

/// Key block size of the streaming attention path.
pub const ATTENTION_BLOCK: usize = 64;

/// Raw attention logits `qᵢᵀ R(i−j) kⱼ` for `[H, N, d]` queries and keys at
/// absolute `positions`.
pub fn rope_scores(q: &Tensor, k: &Tensor, positions: &[usize], base: f64) -> Result<Tensor> {
    if positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(config("positions must be strictly increasing"));
    }
    let qr = q.rope(positions, base)?;
    let kr = k.rope(positions, base)?;
    qr.matmul(&kr.transpose(1, 2)?)
}

/// Scaled causal attention `softmax(q kᵀ/√d) v` over `[H, Nq, d]` queries
/// that are the final `Nq` of the `Nk` keys, computed by a dense score matrix.
pub fn dense_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let d = q.shape()[2];
    let scores = q.matmul(&k.transpose(1, 2)?)?.mul_scalar(1.0 / (d as f32).sqrt());
    scores.causal_softmax()?.matmul(v)
}

/// Same result as [`dense_attention`], streaming over key blocks with a
/// running maximum and normalizer so no `Nq×Nk` matrix is formed. Not
/// differentiable.
pub fn blocked_attention(q: &Tensor, k: &Tensor, v: &Tensor, block: usize) -> Result<Tensor> {
    let (h, nq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let nk = k.shape()[1];
    if k.shape() != [h, nk, d] || v.shape() != k.shape() || nq > nk || block == 0 {
        return Err(crate::tensor::shape_err("blocked_attention", q.shape(), k.shape()));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0f32; h * nq * d];
    let mut acc = vec![0f64; d];
    let mut scores = vec![0f64; block];
    let mut mults = 0u64;
    for head in 0..h {
        let kh = &kd[head * nk * d..(head + 1) * nk * d];
        let vh = &vd[head * nk * d..(head + 1) * nk * d];
        for r in 0..nq {
            let qr = &qd[(head * nq + r) * d..(head * nq + r + 1) * d];
            let visible = r + nk - nq + 1;
            let (mut m, mut z) = (f64::NEG_INFINITY, 0f64);
            acc.iter_mut().for_each(|a| *a = 0.0);
            for start in (0..visible).step_by(block) {
                let end = (start + block).min(visible);
                let mut block_max = f64::NEG_INFINITY;
                for (s, j) in scores.iter_mut().zip(start..end) {
                    let kj = &kh[j * d..(j + 1) * d];
                    let dot: f32 = qr.iter().zip(kj).map(|(a, b)| a * b).sum();
                    *s = dot as f64 * scale;
                    block_max = block_max.max(*s);
                }
                let new_m = m.max(block_max);
                let rescale = (m - new_m).exp();
                z *= rescale;
                acc.iter_mut().for_each(|a| *a *= rescale);
                for (&s, j) in scores.iter().zip(start..end) {
                    let w = (s - new_m).exp();
                    z += w;
                    for (a, &vj) in acc.iter_mut().zip(&vh[j * d..(j + 1) * d]) {
                        *a += w * vj as f64;
                    }
                }
                m = new_m;
            }
            mults += 2 * (visible * d) as u64;
            for (o, a) in out[(head * nq + r) * d..(head * nq + r + 1) * d].iter_mut().zip(&acc) {
                *o = (a / z) as f32;
            }
        }
    }
    count_multiplies(mults);
    Tensor::from_vec(out, &[h, nq, d])
}

/// Multi-head causal self-attention with optional rotary positions.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    heads: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let residual_std = 0.02 / (2.0 * cfg.layers as f32).sqrt();
        Attention {
            query: Linear::new(d, d, false, 0.02, rng),
            key: Linear::new(d, d, false, 0.02, rng),
            value: Linear::new(d, d, false, 0.02, rng),
            output: Linear::new(d, d, false, residual_std, rng),
            heads: cfg.heads,
        }
    }

    /// `[N, D]` → `[H, N, d]`
    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = (x.shape()[0], x.shape()[1]);
        x.reshape(&[n, self.heads, d / self.heads])?.permute(&[1, 0, 2])
    }

    /// Attends the `N` new tokens at `positions` to themselves and, if given,
    /// to the cached keys and values, which are then extended.
    pub fn forward(
        &self,
        x: &Tensor,
        positions: &[usize],
        cfg: &ModelConfig,
        cache: Option<&mut LayerCache>,
    ) -> Result<Tensor> {
        let (n, d_model) = (x.shape()[0], x.shape()[1]);
        let mut q = self.split_heads(&self.query.forward(x)?)?;
        let mut k = self.split_heads(&self.key.forward(x)?)?;
        let v = self.split_heads(&self.value.forward(x)?)?;
        if cfg.rope {
            q = q.rope(positions, cfg.rope_base)?;
            k = k.rope(positions, cfg.rope_base)?;
        }
        let (k, v) = match cache {
            Some(c) => c.append(&k, &v)?,
            None => (k, v),
        };
        let ctx = if grad_enabled() {
            dense_attention(&q, &k, &v)?
        } else {
            blocked_attention(&q, &k, &v, ATTENTION_BLOCK)?
        };
        let merged = ctx.permute(&[1, 0, 2])?.reshape(&[n, d_model])?;
        self.output.forward(&merged)
    }
}

impl Module for Attention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rotate_block(theta: f64, a: f64, b: f64) -> (f64, f64) {
        (a * theta.cos() - b * theta.sin(), a * theta.sin() + b * theta.cos())
    }

    #[test]
    fn explicit_rotation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, n, d) = (1, 3, 4);
        let q = Tensor::randn(&[h, n, d], 1.0, &mut rng);
        let k = Tensor::randn(&[h, n, d], 1.0, &mut rng);
        let pos = [0, 1, 2];
        let logits = rope_scores(&q, &k, &pos, 10_000.0).unwrap();
        for i in 0..n {
            for j in 0..n {
                let qi = &q.data()[i * d..(i + 1) * d];
                let kj = &k.data()[j * d..(j + 1) * d];
                let mut acc = 0.0;
                for p in 0..d / 2 {
                    let theta = 10_000f64.powf(-2.0 * p as f64 / d as f64) * (i as f64 - j as f64);
                    let (r0, r1) = rotate_block(theta, kj[2 * p] as f64, kj[2 * p + 1] as f64);
                    acc += qi[2 * p] as f64 * r0 + qi[2 * p + 1] as f64 * r1;
                }
                assert!((acc - logits.data()[i * n + j] as f64).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn diagonal_is_plain_dot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = Tensor::randn(&[2, 4, 6], 1.0, &mut rng);
        let k = Tensor::randn(&[2, 4, 6], 1.0, &mut rng);
        let logits = rope_scores(&q, &k, &[3, 4, 5, 6], 10_000.0).unwrap();
        for h in 0..2 {
            for i in 0..4 {
                let base = (h * 4 + i) * 6;
                let dot: f32 = (0..6).map(|c| q.data()[base + c] * k.data()[base + c]).sum();
                assert!((dot - logits.data()[(h * 4 + i) * 4 + i]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn shifted_positions_leave_logits_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = Tensor::randn(&[2, 5, 8], 1.0, &mut rng);
        let k = Tensor::randn(&[2, 5, 8], 1.0, &mut rng);
        let a = rope_scores(&q, &k, &[0, 1, 2, 3, 4], 10_000.0).unwrap();
        let b = rope_scores(&q, &k, &[7, 8, 9, 10, 11], 10_000.0).unwrap();
        let worst = a.data().iter().zip(b.data()).fold(0f32, |m, (x, y)| m.max((x - y).abs()));
        assert!(worst < 1e-5, "{worst}");
    }

    #[test]
    fn non_increasing_positions_rejected() {
        let q = Tensor::zeros(&[1, 2, 2]);
        assert!(rope_scores(&q, &q, &[1, 1], 10_000.0).is_err());
    }

    #[test]
    fn blocked_path_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let q = Tensor::randn(&[3, 5, 8], 1.0, &mut rng);
        let k = Tensor::randn(&[3, 37, 8], 1.0, &mut rng);
        let v = Tensor::randn(&[3, 37, 8], 1.0, &mut rng);
        let dense = dense_attention(&q, &k, &v).unwrap();
        for block in [1, 4, 16, 64] {
            let b = blocked_attention(&q, &k, &v, block).unwrap();
            let worst = dense.data().iter().zip(b.data()).fold(0f32, |m, (x, y)| m.max((x - y).abs()));
            assert!(worst < 1e-5, "block {block}: {worst}");
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = ModelConfig::tiny();
        let attn = Attention::new(&cfg, &mut rng);
        let x = Tensor::randn(&[1, cfg.d_model], 1.0, &mut rng);
        let out = attn.forward(&x, &[0], &cfg, None).unwrap();
        let expect = attn.output.forward(&attn.value.forward(&x).unwrap()).unwrap();
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn equal_queries_and_keys_give_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut cfg = ModelConfig::tiny();
        cfg.rope = false;
        let mut attn = Attention::new(&cfg, &mut rng);
        attn.output = Linear::new(cfg.d_model, cfg.d_model, false, 0.3, &mut rng);
        // identical tokens give identical q and k, and each row averages the
        // values of its visible prefix; with distinct values the mean shows up
        let row = Tensor::randn(&[1, cfg.d_model], 1.0, &mut rng);
        let x = Tensor::concat(&[row.clone(), row.clone(), row], 0).unwrap();
        let out = attn.forward(&x, &[0, 1, 2], &cfg, None).unwrap();
        let d = cfg.d_model;
        for i in 1..3 {
            for c in 0..d {
                assert!((out.data()[i * d + c] - out.data()[c]).abs() < 1e-6);
            }
        }
        // and with distinct values, weights are the uniform 1/i over the prefix
        let v_rows = Tensor::randn(&[3, d], 1.0, &mut rng);
        let zero_qk = Attention {
            query: Linear::zeros(d, d, false),
            key: Linear::zeros(d, d, false),
            value: attn.value.clone(),
            output: attn.output.clone(),
            heads: cfg.heads,
        };
        let out = zero_qk.forward(&v_rows, &[0, 1, 2], &cfg, None).unwrap();
        let values = zero_qk.value.forward(&v_rows).unwrap();
        for i in 0..3 {
            let mean: Vec<f32> = (0..d)
                .map(|c| (0..=i).map(|j| values.data()[j * d + c]).sum::<f32>() / (i + 1) as f32)
                .collect();
            let expect = zero_qk.output.forward(&Tensor::from_vec(mean, &[1, d]).unwrap()).unwrap();
            for c in 0..d {
                assert!((out.data()[i * d + c] - expect.data()[c]).abs() < 1e-5);
            }
        }
    }
}
