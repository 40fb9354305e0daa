use super::shape::strides;
use super::{numel, shape_err, Tensor};
use crate::error::{contract, Result};

fn permute_data(data: &[f32], shape: &[usize], perm: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..total {
        out.push(data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(shape_err("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op("reshape", self.to_vec(), shape.to_vec(), vec![self.clone()], |g| {
            vec![Some(g.to_vec())]
        }))
    }

    /// Reorders axes; output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", self.shape(), perm));
        }
        let (data, out_shape) = permute_data(self.data(), self.shape(), perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let grad_shape = out_shape.clone();
        Ok(Tensor::from_op("permute", data, out_shape, vec![self.clone()], move |g| {
            vec![Some(permute_data(g, &grad_shape, &inverse).0)]
        }))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        if a >= perm.len() || b >= perm.len() {
            return Err(shape_err("transpose", self.shape(), &[a, b]));
        }
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err("narrow", shape, &[axis, start, len]));
        }
        let outer: usize = shape[..axis].iter().product();
        let full = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        let x = self.data();
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let n = self.numel();
        Ok(Tensor::from_op("narrow", data, out_shape, vec![self.clone()], move |g| {
            let mut gx = vec![0f32; n];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| contract("concat of zero tensors"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(shape_err("concat", first.shape(), &[axis]));
        }
        for p in parts {
            let ok = p.rank() == rank
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", first.shape(), p.shape()));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let lens_b = lens.clone();
        Ok(Tensor::from_op("concat", data, shape, parts.to_vec(), move |g| {
            let mut out: Vec<Vec<f32>> = lens_b.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (buf, &l) in out.iter_mut().zip(&lens_b) {
                    buf.extend_from_slice(&g[pos..pos + l * inner]);
                    pos += l * inner;
                }
            }
            out.into_iter().map(Some).collect()
        }))
    }

    /// Gathers entries along axis 0; indices may repeat.
    pub fn index_select(&self, indices: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        if shape.is_empty() || indices.is_empty() || indices.iter().any(|&i| i >= shape[0]) {
            return Err(contract(format!(
                "index_select {indices:?} out of range for shape {shape:?}"
            )));
        }
        let row: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&self.data()[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = indices.len();
        let idx = indices.to_vec();
        let n = self.numel();
        Ok(Tensor::from_op("index_select", data, out_shape, vec![self.clone()], move |g| {
            let mut gx = vec![0f32; n];
            for (k, &i) in idx.iter().enumerate() {
                for (d, s) in gx[i * row..(i + 1) * row].iter_mut().zip(&g[k * row..(k + 1) * row]) {
                    *d += s;
                }
            }
            vec![Some(gx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::{check_grad, rand_param};
    use super::*;

    #[test]
    fn transpose_2d() {
        let a = Tensor::from_vec(vec![1., 2., 3., 4., 5., 6.], &[2, 3]).unwrap();
        let t = a.transpose(0, 1).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.to_vec(), vec![1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn permute_3d_roundtrip() {
        let a = rand_param(&[2, 3, 4], 1);
        let p = a.permute(&[1, 2, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 4, 2]);
        let back = p.permute(&[2, 0, 1]).unwrap();
        assert_eq!(back.to_vec(), a.to_vec());
        assert!(check_grad(&[a], |t| t[0].permute(&[1, 2, 0]).unwrap(), 1e-2) < 1e-3);
    }

    #[test]
    fn narrow_concat_index_select_grads() {
        let a = rand_param(&[3, 4], 2);
        assert!(check_grad(std::slice::from_ref(&a), |t| t[0].narrow(1, 1, 2).unwrap(), 1e-2) < 1e-3);
        let b = rand_param(&[3, 2], 3);
        assert!(check_grad(&[a.clone(), b], |t| Tensor::concat(&[t[0].clone(), t[1].clone()], 1).unwrap(), 1e-2) < 1e-3);
        assert!(check_grad(&[a], |t| t[0].index_select(&[2, 0, 2]).unwrap(), 1e-2) < 1e-3);
    }

    #[test]
    fn concat_then_narrow_is_identity() {
        let a = rand_param(&[2, 3], 4);
        let b = rand_param(&[2, 5], 5);
        let c = Tensor::concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.narrow(1, 0, 3).unwrap().to_vec(), a.to_vec());
        assert_eq!(c.narrow(1, 3, 5).unwrap().to_vec(), b.to_vec());
    }

    #[test]
    fn reshape_rejects_wrong_count() {
        assert!(Tensor::zeros(&[2, 3]).reshape(&[4]).is_err());
    }
}
