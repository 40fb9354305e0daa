use std::sync::Arc;

use super::{shape_err, Tensor};
use crate::error::{config, Result};

/// Softmax of one row in f64; entries past `visible` are zero.
fn softmax_row(x: &[f32], visible: usize, out: &mut [f32]) {
    let m = x[..visible].iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let mut z = 0f64;
    for (o, &v) in out[..visible].iter_mut().zip(&x[..visible]) {
        let e = (v as f64 - m).exp();
        *o = e as f32;
        z += e;
    }
    for o in out[..visible].iter_mut() {
        *o = (*o as f64 / z) as f32;
    }
    for o in out[visible..].iter_mut() {
        *o = 0.0;
    }
}

fn softmax_backward(y: &[f32], g: &[f32], cols: usize) -> Vec<f32> {
    let mut gx = vec![0f32; y.len()];
    for ((yr, gr), out) in y.chunks(cols).zip(g.chunks(cols)).zip(gx.chunks_mut(cols)) {
        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a as f64 * b as f64).sum();
        for ((o, &yi), &gi) in out.iter_mut().zip(yr).zip(gr) {
            *o = (yi as f64 * (gi as f64 - dot)) as f32;
        }
    }
    gx
}

impl Tensor {
    /// Softmax over the last axis.
    pub fn softmax(&self) -> Tensor {
        let cols = *self.shape().last().unwrap_or(&1);
        let mut out = vec![0f32; self.numel()];
        for (x, o) in self.data().chunks(cols).zip(out.chunks_mut(cols)) {
            softmax_row(x, cols, o);
        }
        let y = Arc::new(out.clone());
        Tensor::from_op("softmax", out, self.shape().to_vec(), vec![self.clone()], move |g| {
            vec![Some(softmax_backward(&y, g, cols))]
        })
    }

    /// Softmax over the last axis of `[.., q, k]` scores where the `q` queries
    /// are the final `q` of the `k` keys: query `r` sees keys `0..=r + k - q`.
    pub fn causal_softmax(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() < 2 || s[s.len() - 2] > s[s.len() - 1] {
            return Err(shape_err("causal_softmax", s, &[]));
        }
        let (nq, nk) = (s[s.len() - 2], s[s.len() - 1]);
        let mut out = vec![0f32; self.numel()];
        for (r, (x, o)) in self.data().chunks(nk).zip(out.chunks_mut(nk)).enumerate() {
            softmax_row(x, r % nq + nk - nq + 1, o);
        }
        let y = Arc::new(out.clone());
        Ok(Tensor::from_op("causal_softmax", out, s.to_vec(), vec![self.clone()], move |g| {
            vec![Some(softmax_backward(&y, g, nk))]
        }))
    }

    /// Standardizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&self, eps: f64) -> Tensor {
        let cols = *self.shape().last().unwrap_or(&1);
        let rows = self.numel() / cols;
        let mut out = vec![0f32; self.numel()];
        let mut inv_std = vec![0f64; rows];
        for (r, (x, o)) in self.data().chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let mean = x.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
            let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (oi, &xi) in o.iter_mut().zip(x) {
                *oi = ((xi as f64 - mean) * is) as f32;
            }
        }
        let y = Arc::new(out.clone());
        Tensor::from_op("layer_norm", out, self.shape().to_vec(), vec![self.clone()], move |g| {
            let mut gx = vec![0f32; y.len()];
            for (r, ((yr, gr), o)) in y.chunks(cols).zip(g.chunks(cols)).zip(gx.chunks_mut(cols)).enumerate() {
                let gm = gr.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
                let gym = gr.iter().zip(yr).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / cols as f64;
                for ((oi, &gi), &yi) in o.iter_mut().zip(gr).zip(yr) {
                    *oi = (inv_std[r] * (gi as f64 - gm - yi as f64 * gym)) as f32;
                }
            }
            vec![Some(gx)]
        })
    }

    /// Rotary position embedding over the last axis of `[.., n, d]`.
    ///
    /// Consecutive pairs `(2i, 2i+1)` of the row at absolute position `p` are
    /// rotated by `-p·θᵢ`, `θᵢ = base^(-2i/d)`, so that the dot product of a
    /// rotated query at `i` and key at `j` equals `qᵀ R(i−j) k`.
    pub fn rope(&self, positions: &[usize], base: f64) -> Result<Tensor> {
        let s = self.shape();
        if s.len() < 2 || s[s.len() - 2] != positions.len() {
            return Err(shape_err("rope", s, &[positions.len()]));
        }
        let d = s[s.len() - 1];
        if !d.is_multiple_of(2) {
            return Err(config(format!("rotary embedding needs an even head width, got {d}")));
        }
        let table = Arc::new(rope_table(positions, d, base));
        let rotate = move |x: &[f32], sign: f64, table: &[(f64, f64)]| -> Vec<f32> {
            let n_pos = table.len() / (d / 2);
            let mut out = vec![0f32; x.len()];
            for (r, (xr, or)) in x.chunks(d).zip(out.chunks_mut(d)).enumerate() {
                let row = &table[(r % n_pos) * (d / 2)..(r % n_pos + 1) * (d / 2)];
                for (i, &(c, sn)) in row.iter().enumerate() {
                    let (a, b) = (xr[2 * i] as f64, xr[2 * i + 1] as f64);
                    let sn = sign * sn;
                    or[2 * i] = (a * c + b * sn) as f32;
                    or[2 * i + 1] = (-a * sn + b * c) as f32;
                }
            }
            out
        };
        let data = rotate(self.data(), 1.0, &table);
        Ok(Tensor::from_op("rope", data, s.to_vec(), vec![self.clone()], move |g| {
            vec![Some(rotate(g, -1.0, &table))]
        }))
    }
}

/// `(cos, sin)` of `p·θᵢ` for each position and pair index.
fn rope_table(positions: &[usize], d: usize, base: f64) -> Vec<(f64, f64)> {
    let mut t = Vec::with_capacity(positions.len() * d / 2);
    for &p in positions {
        for i in 0..d / 2 {
            let theta = base.powf(-2.0 * i as f64 / d as f64);
            let a = p as f64 * theta;
            t.push((a.cos(), a.sin()));
        }
    }
    t
}
