//! Plain-loop double-precision re-implementation of the model forward pass
//! and flow-matching loss. It shares no code with the tensor engine and
//! serves as the finite-difference oracle for gradient checking.

use std::collections::HashMap;

use crate::backbone::ModelConfig;
use crate::error::{contract, Result};
use crate::layers::{named_params, LN_EPS};
use crate::model::SundialModel;
use crate::timeflow::TIME_FEATURES;

/// Parameters by hierarchical name, widened to `f64`.
pub type ParamMap = HashMap<String, Vec<f64>>;

pub fn param_map(model: &SundialModel) -> ParamMap {
    named_params(model)
        .into_iter()
        .map(|(n, t)| (n, t.data().iter().map(|&v| v as f64).collect()))
        .collect()
}

/// Row-major `rows × cols` matrix.
#[derive(Clone, Debug)]
struct Mat {
    rows: usize,
    cols: usize,
    v: Vec<f64>,
}

impl Mat {
    fn new(rows: usize, cols: usize, v: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, v.len());
        Mat { rows, cols, v }
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.v[r * self.cols + c]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat::new(self.rows, self.cols, self.v.iter().map(|&x| f(x)).collect())
    }

    fn zip(&self, o: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        Mat::new(self.rows, self.cols, self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect())
    }

    fn cols_range(&self, start: usize, len: usize) -> Mat {
        let mut v = Vec::with_capacity(self.rows * len);
        for r in 0..self.rows {
            v.extend_from_slice(&self.v[r * self.cols + start..r * self.cols + start + len]);
        }
        Mat::new(self.rows, len, v)
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.v[r * self.cols..(r + 1) * self.cols]
    }
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn standardize_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for r in 0..x.rows {
        let row = x.row(r);
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let is = 1.0 / (var + LN_EPS).sqrt();
        for c in 0..x.cols {
            out.v[r * x.cols + c] = (row[c] - mean) * is;
        }
    }
    out
}

struct Ref<'a> {
    cfg: &'a ModelConfig,
    p: &'a ParamMap,
}

impl Ref<'_> {
    fn get(&self, name: &str) -> Result<&[f64]> {
        self.p
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| contract(format!("reference is missing parameter {name}")))
    }

    fn linear(&self, x: &Mat, name: &str, d_out: usize) -> Result<Mat> {
        let w = self.get(&format!("{name}.weight"))?;
        let bias = self.p.get(&format!("{name}.bias"));
        let mut out = vec![0f64; x.rows * d_out];
        for r in 0..x.rows {
            for c in 0..d_out {
                let mut acc = bias.map_or(0.0, |b| b[c]);
                for k in 0..x.cols {
                    acc += x.at(r, k) * w[k * d_out + c];
                }
                out[r * d_out + c] = acc;
            }
        }
        Ok(Mat::new(x.rows, d_out, out))
    }

    fn layer_norm(&self, x: &Mat, name: &str) -> Result<Mat> {
        let g = self.get(&format!("{name}.gain"))?;
        let b = self.get(&format!("{name}.offset"))?;
        let mut y = standardize_rows(x);
        for r in 0..y.rows {
            for c in 0..y.cols {
                y.v[r * y.cols + c] = y.v[r * y.cols + c] * g[c] + b[c];
            }
        }
        Ok(y)
    }

    fn embed(&self, rows: &Mat) -> Result<Mat> {
        let d = self.cfg.d_model;
        let h = self.linear(rows, "embed.hidden", d)?.map(gelu);
        self.linear(&h, "embed.output", d)
    }

    fn rotate(&self, x: &mut [f64], pos: usize) {
        let d = x.len();
        for i in 0..d / 2 {
            let theta = self.cfg.rope_base.powf(-2.0 * i as f64 / d as f64);
            let (s, c) = (pos as f64 * theta).sin_cos();
            let (a, b) = (x[2 * i], x[2 * i + 1]);
            x[2 * i] = a * c + b * s;
            x[2 * i + 1] = -a * s + b * c;
        }
    }

    fn attention(&self, x: &Mat, prefix: &str) -> Result<Mat> {
        let (n, d, h) = (x.rows, self.cfg.d_model, self.cfg.heads);
        let dh = d / h;
        let q = self.linear(x, &format!("{prefix}.query"), d)?;
        let k = self.linear(x, &format!("{prefix}.key"), d)?;
        let v = self.linear(x, &format!("{prefix}.value"), d)?;
        let mut ctx = vec![0f64; n * d];
        for head in 0..h {
            let slice = |m: &Mat, r: usize| m.row(r)[head * dh..(head + 1) * dh].to_vec();
            let mut qs: Vec<Vec<f64>> = (0..n).map(|r| slice(&q, r)).collect();
            let mut ks: Vec<Vec<f64>> = (0..n).map(|r| slice(&k, r)).collect();
            if self.cfg.rope {
                for r in 0..n {
                    self.rotate(&mut qs[r], r);
                    self.rotate(&mut ks[r], r);
                }
            }
            for i in 0..n {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| qs[i].iter().zip(&ks[j]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, ej) in e.iter().enumerate() {
                    for c in 0..dh {
                        ctx[i * d + head * dh + c] += ej / z * v.at(j, head * dh + c);
                    }
                }
            }
        }
        self.linear(&Mat::new(n, d, ctx), &format!("{prefix}.output"), d)
    }

    fn ffn(&self, x: &Mat, prefix: &str) -> Result<Mat> {
        let ff = self.cfg.d_ff;
        let gate = self.linear(x, &format!("{prefix}.gate"), ff)?.map(gelu);
        let up = self.linear(x, &format!("{prefix}.up"), ff)?;
        self.linear(&gate.zip(&up, |a, b| a * b), &format!("{prefix}.down"), self.cfg.d_model)
    }

    fn backbone(&self, mut x: Mat) -> Result<Mat> {
        for l in 0..self.cfg.layers {
            let b = format!("backbone.blocks.{l}");
            if self.cfg.pre_ln {
                let a = self.attention(&self.layer_norm(&x, &format!("{b}.attn_norm"))?, &format!("{b}.attn"))?;
                x = x.zip(&a, |p, q| p + q);
                let f = self.ffn(&self.layer_norm(&x, &format!("{b}.ffn_norm"))?, &format!("{b}.ffn"))?;
                x = x.zip(&f, |p, q| p + q);
            } else {
                let a = self.attention(&x, &format!("{b}.attn"))?;
                x = self.layer_norm(&x.zip(&a, |p, q| p + q), &format!("{b}.attn_norm"))?;
                let f = self.ffn(&x, &format!("{b}.ffn"))?;
                x = self.layer_norm(&x.zip(&f, |p, q| p + q), &format!("{b}.ffn_norm"))?;
            }
        }
        if self.cfg.pre_ln {
            x = self.layer_norm(&x, "backbone.final_norm")?;
        }
        Ok(x)
    }

    fn modulate(&self, x: &Mat, m: &Mat, w: usize) -> Mat {
        let shift = m.cols_range(0, w);
        let scale = m.cols_range(w, w);
        standardize_rows(x).zip(&scale, |a, s| a * (1.0 + s)).zip(&shift, |a, s| a + s)
    }

    fn fmnet(&self, y_t: &Mat, t: &[f64], h: &Mat) -> Result<Mat> {
        let w = self.cfg.flow_dim;
        let half = TIME_FEATURES / 2;
        let mut feats = Vec::with_capacity(t.len() * TIME_FEATURES);
        for &ti in t {
            let args: Vec<f64> = (0..half)
                .map(|i| ti * 1000.0 * (-(10_000f64.ln()) * i as f64 / half as f64).exp())
                .collect();
            feats.extend(args.iter().map(|a| a.cos()));
            feats.extend(args.iter().map(|a| a.sin()));
        }
        let feats = Mat::new(t.len(), TIME_FEATURES, feats);
        let temb = self.linear(&self.linear(&feats, "head.time_hidden", w)?.map(silu), "head.time_out", w)?;
        let c = temb.zip(&self.linear(h, "head.cond", w)?, |a, b| a + b).map(silu);
        let mut x = self.linear(y_t, "head.input", w)?;
        for b in 0..self.cfg.flow_blocks {
            let p = format!("head.blocks.{b}");
            let m = self.linear(&c, &format!("{p}.modulation"), 3 * w)?;
            let u = self.modulate(&x, &m, w);
            let u = self.linear(&self.linear(&u, &format!("{p}.fc1"), w)?.map(silu), &format!("{p}.fc2"), w)?;
            let gate = m.cols_range(2 * w, w);
            x = x.zip(&gate.zip(&u, |g, v| g * v), |a, b| a + b);
        }
        let m = self.linear(&c, "head.final_modulation", 2 * w)?;
        self.linear(&self.modulate(&x, &m, w), "head.output", self.cfg.horizon)
    }
}

/// One context's patch rows `[N, 2P]` and the token indices that carry targets.
pub struct RefItem {
    pub rows: Vec<f64>,
    pub n_tokens: usize,
    pub positions: Vec<usize>,
}

/// Final-layer representations `[N, D]` for patch rows `[N, 2P]`.
pub fn representations(cfg: &ModelConfig, params: &ParamMap, rows: &[f64], n_tokens: usize) -> Result<Vec<f64>> {
    let r = Ref { cfg, p: params };
    let x = r.embed(&Mat::new(n_tokens, 2 * cfg.patch_len, rows.to_vec()))?;
    Ok(r.backbone(x)?.v)
}

/// FM-Net output `[B, F]` for `y_t [B, F]`, `t [B]` and `h [B, D]`.
pub fn fmnet(cfg: &ModelConfig, params: &ParamMap, y_t: &[f64], t: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    let r = Ref { cfg, p: params };
    let b = t.len();
    Ok(r
        .fmnet(&Mat::new(b, cfg.horizon, y_t.to_vec()), t, &Mat::new(b, cfg.d_model, h.to_vec()))?
        .v)
}

/// Flow-matching loss over the target rows of `items` (concatenated in
/// order) with fixed `t [M]`, targets `y [M, F]` and noise `y0 [M, F]`.
pub fn timeflow_loss(
    cfg: &ModelConfig,
    params: &ParamMap,
    items: &[RefItem],
    y: &[f64],
    t: &[f64],
    y0: &[f64],
) -> Result<f64> {
    let d = cfg.d_model;
    let mut h = Vec::new();
    for it in items {
        let reps = representations(cfg, params, &it.rows, it.n_tokens)?;
        for &p in &it.positions {
            h.extend_from_slice(&reps[p * d..(p + 1) * d]);
        }
    }
    let f = cfg.horizon;
    let y_t: Vec<f64> = (0..y.len()).map(|i| t[i / f] * y[i] + (1.0 - t[i / f]) * y0[i]).collect();
    let v = fmnet(cfg, params, &y_t, t, &h)?;
    Ok(v.iter().zip(y.iter().zip(y0)).map(|(vi, (yi, y0i))| (vi - (yi - y0i)).powi(2)).sum::<f64>() / y.len() as f64)
}
