use super::shape::{broadcast_shape, index_map};
use super::{count_multiplies, shape_err, Tensor};
use crate::error::Result;

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm_nn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

#[inline]
fn dot(x: &[f32], y: &[f32]) -> f32 {
    let mut lanes = [0f32; 8];
    let chunks = x.len() / 8;
    for c in 0..chunks {
        let xs = &x[c * 8..c * 8 + 8];
        let ys = &y[c * 8..c * 8 + 8];
        for l in 0..8 {
            lanes[l] += xs[l] * ys[l];
        }
    }
    let mut tail = 0f32;
    for i in chunks * 8..x.len() {
        tail += x[i] * y[i];
    }
    lanes.iter().sum::<f32>() + tail
}

/// `c[m,k] += a[m,n] · b[k,n]ᵀ`
pub(crate) fn gemm_nt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            c[i * k + p] += dot(arow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`
pub(crate) fn gemm_tn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

impl Tensor {
    /// Matrix product over the last two axes with broadcast batch axes.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape(ba, bb).ok_or_else(|| shape_err("matmul", sa, sb))?;
        let nbatch: usize = batch.iter().product();
        let ia = index_map(&batch, ba);
        let ib = index_map(&batch, bb);

        let (a, b) = (self.data(), rhs.data());
        let mut out = vec![0f32; nbatch * m * n];
        for z in 0..nbatch {
            gemm_nn(
                &a[ia[z] * m * k..(ia[z] + 1) * m * k],
                &b[ib[z] * k * n..(ib[z] + 1) * k * n],
                &mut out[z * m * n..(z + 1) * m * n],
                m,
                k,
                n,
            );
        }
        count_multiplies((nbatch * m * k * n) as u64);

        let mut shape = batch.clone();
        shape.extend([m, n]);
        let (lhs, rhs_t) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op("matmul", out, shape, vec![self.clone(), rhs.clone()], move |g| {
            let (a, b) = (lhs.data(), rhs_t.data());
            let ga = lhs.requires_grad().then(|| {
                let mut ga = vec![0f32; a.len()];
                for z in 0..nbatch {
                    gemm_nt(
                        &g[z * m * n..(z + 1) * m * n],
                        &b[ib[z] * k * n..(ib[z] + 1) * k * n],
                        &mut ga[ia[z] * m * k..(ia[z] + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                ga
            });
            let gb = rhs_t.requires_grad().then(|| {
                let mut gb = vec![0f32; b.len()];
                for z in 0..nbatch {
                    gemm_tn(
                        &a[ia[z] * m * k..(ia[z] + 1) * m * k],
                        &g[z * m * n..(z + 1) * m * n],
                        &mut gb[ib[z] * k * n..(ib[z] + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                gb
            });
            vec![ga, gb]
        }))
    }
}
