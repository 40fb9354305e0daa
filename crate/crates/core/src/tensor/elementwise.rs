use std::sync::Arc;

use super::shape::{broadcast_shape, reduce_to, Bcast};
use super::{shape_err, Tensor};
use crate::error::Result;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    #[inline]
    fn apply(self, a: f32, b: f32) -> f32 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }
}

impl Tensor {
    fn binary(&self, rhs: &Tensor, op: Binary) -> Result<Tensor> {
        let out_shape = broadcast_shape(self.shape(), rhs.shape())
            .ok_or_else(|| shape_err(op.name(), self.shape(), rhs.shape()))?;
        let ma = Arc::new(Bcast::new(&out_shape, self.shape()));
        let mb = Arc::new(Bcast::new(&out_shape, rhs.shape()));
        let n: usize = out_shape.iter().product();
        let (a, b) = (self.data(), rhs.data());
        let data: Vec<f32> = match (&*ma, &*mb) {
            (Bcast::Same, Bcast::Same) => a.iter().zip(b).map(|(&x, &y)| op.apply(x, y)).collect(),
            _ => (0..n).map(|i| op.apply(a[ma.at(i)], b[mb.at(i)])).collect(),
        };

        let (lhs, rhs_t) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(op.name(), data, out_shape, vec![self.clone(), rhs.clone()], move |g| {
            let (a, b) = (lhs.data(), rhs_t.data());
            let ga = lhs.requires_grad().then(|| {
                let local: Vec<f32> = match op {
                    Binary::Add | Binary::Sub => g.to_vec(),
                    Binary::Mul => g.iter().enumerate().map(|(i, &gi)| gi * b[mb.at(i)]).collect(),
                    Binary::Div => g.iter().enumerate().map(|(i, &gi)| gi / b[mb.at(i)]).collect(),
                };
                reduce_to(&local, &ma, a.len())
            });
            let gb = rhs_t.requires_grad().then(|| {
                let local: Vec<f32> = match op {
                    Binary::Add => g.to_vec(),
                    Binary::Sub => g.iter().map(|&gi| -gi).collect(),
                    Binary::Mul => g.iter().enumerate().map(|(i, &gi)| gi * a[ma.at(i)]).collect(),
                    Binary::Div => g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| {
                            let bv = b[mb.at(i)];
                            -gi * a[ma.at(i)] / (bv * bv)
                        })
                        .collect(),
                };
                reduce_to(&local, &mb, b.len())
            });
            vec![ga, gb]
        }))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Binary::Add)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Binary::Sub)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Binary::Mul)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Binary::Div)
    }

    /// Elementwise map with derivative `df(x, y)` expressed through input and output.
    fn unary(&self, op: &'static str, f: fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Tensor {
        let data: Vec<f32> = self.data().iter().map(|&x| f(x as f64) as f32).collect();
        let x = self.clone();
        let y = Arc::new(data.clone());
        Tensor::from_op(op, data, self.shape().to_vec(), vec![self.clone()], move |g| {
            let gx = g
                .iter()
                .zip(x.data())
                .zip(y.iter())
                .map(|((&gi, &xi), &yi)| (gi as f64 * df(xi as f64, yi as f64)) as f32)
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn exp(&self) -> Tensor {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary("sqrt", f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn tanh(&self) -> Tensor {
        self.unary("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn gelu(&self) -> Tensor {
        self.unary("gelu", gelu_scalar, |x, _| gelu_grad(x))
    }

    pub fn silu(&self) -> Tensor {
        self.unary("silu", |x| x * sigmoid(x), |x, _| {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        })
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn square(&self) -> Tensor {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn mul_scalar(&self, c: f32) -> Tensor {
        let data = self.data().iter().map(|&x| x * c).collect();
        Tensor::from_op("mul_scalar", data, self.shape().to_vec(), vec![self.clone()], move |g| {
            vec![Some(g.iter().map(|&v| v * c).collect())]
        })
    }

    pub fn add_scalar(&self, c: f32) -> Tensor {
        let data = self.data().iter().map(|&x| x + c).collect();
        Tensor::from_op("add_scalar", data, self.shape().to_vec(), vec![self.clone()], |g| {
            vec![Some(g.to_vec())]
        })
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().map(|&v| v as f64).sum();
        let n = self.numel();
        Tensor::from_op("sum_all", vec![s as f32], vec![], vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        Tensor::from_op("mean_all", vec![s as f32], vec![], vec![self.clone()], move |g| {
            vec![Some(vec![g[0] / n as f32; n])]
        })
    }

    /// Sums over `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, false)
    }

    /// Averages over `axis`, keeping it with extent 1.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, true)
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(shape_err("reduce_axis", self.shape(), &[axis]));
        }
        let shape = self.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let scale = if mean { 1.0 / len as f64 } else { 1.0 };
        let x = self.data();
        let mut out = vec![0f32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..len).map(|k| x[(o * len + k) * inner + i] as f64).sum();
                out[o * inner + i] = (s * scale) as f32;
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = 1;
        let n = self.numel();
        Ok(Tensor::from_op(
            if mean { "mean_axis" } else { "sum_axis" },
            out,
            out_shape,
            vec![self.clone()],
            move |g| {
                let mut gx = vec![0f32; n];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            gx[(o * len + k) * inner + i] = (g[o * inner + i] as f64 * scale) as f32;
                        }
                    }
                }
                vec![Some(gx)]
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::{check_grad, rand_param};
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gelu_matches_formula() {
        let x = Tensor::from_vec(vec![1.0], &[1]).unwrap();
        let expect = 0.5 * 1.0 * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (1.0 + 0.044715)).tanh());
        assert!((x.gelu().data()[0] as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn binary_grads_match_finite_differences() {
        let a = rand_param(&[3, 4], 1);
        let b = rand_param(&[4], 2);
        assert!(check_grad(&[a.clone(), b.clone()], |t| t[0].add(&t[1]).unwrap(), 1e-2) < 1e-3);
        let a = rand_param(&[3, 4], 3);
        let b = rand_param(&[3, 1], 4);
        assert!(check_grad(&[a, b], |t| t[0].mul(&t[1]).unwrap(), 1e-2) < 1e-3);
        let a = rand_param(&[2, 3], 5);
        let b = Tensor::param(vec![1.5, -2.0, 2.5], &[3]).unwrap();
        assert!(check_grad(&[a, b], |t| t[0].div(&t[1]).unwrap(), 1e-3) < 1e-3);
        let a = rand_param(&[2, 1, 3], 6);
        let b = rand_param(&[4, 1], 7);
        assert!(check_grad(&[a, b], |t| t[0].sub(&t[1]).unwrap(), 1e-2) < 1e-3);
    }

    #[test]
    fn unary_grads_match_finite_differences() {
        let x = rand_param(&[2, 5], 8);
        assert!(check_grad(std::slice::from_ref(&x), |t| t[0].exp(), 1e-3) < 1e-3);
        assert!(check_grad(std::slice::from_ref(&x), |t| t[0].tanh(), 1e-3) < 1e-3);
        assert!(check_grad(std::slice::from_ref(&x), |t| t[0].gelu(), 1e-3) < 1e-3);
        assert!(check_grad(std::slice::from_ref(&x), |t| t[0].silu(), 1e-3) < 1e-3);
        assert!(check_grad(std::slice::from_ref(&x), |t| t[0].square(), 1e-3) < 1e-3);
        let pos = Tensor::param(vec![0.5, 1.0, 2.0, 3.5], &[4]).unwrap();
        assert!(check_grad(&[pos], |t| t[0].sqrt(), 1e-3) < 1e-3);
    }

    #[test]
    fn reduction_grads_match_finite_differences() {
        let x = rand_param(&[2, 3, 4], 9);
        assert!(check_grad(std::slice::from_ref(&x), |t| t[0].sum_axis(1).unwrap(), 1e-2) < 1e-3);
        assert!(check_grad(std::slice::from_ref(&x), |t| t[0].mean_axis(2).unwrap(), 1e-2) < 1e-3);
        assert!(check_grad(&[x], |t| t[0].mean_all(), 1e-2) < 1e-3);
    }

    #[cfg(debug_assertions)]
    #[test]
    #[should_panic(expected = "non-finite")]
    fn division_by_zero_is_flagged() {
        let a = Tensor::from_vec(vec![1.0], &[1]).unwrap();
        let b = Tensor::from_vec(vec![0.0], &[1]).unwrap();
        let _ = a.div(&b);
    }

    fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
        proptest::collection::vec(1usize..=4, 0..=3)
    }

    proptest! {
        /// Broadcast add against a scalar-loop oracle over explicit indices.
        #[test]
        fn broadcast_matches_scalar_loop(a_shape in shape_strategy(), drop in proptest::collection::vec(any::<bool>(), 3), trim in 0usize..=2) {
            // rhs: trailing slice of a_shape with some axes collapsed to 1
            let start = trim.min(a_shape.len());
            let b_shape: Vec<usize> = a_shape[start..].iter().zip(&drop).map(|(&d, &z)| if z { 1 } else { d }).collect();
            let na: usize = a_shape.iter().product();
            let nb: usize = b_shape.iter().product();
            let a = Tensor::from_vec((0..na).map(|i| i as f32).collect(), &a_shape).unwrap();
            let b = Tensor::from_vec((0..nb).map(|i| 100.0 * i as f32).collect(), &b_shape).unwrap();
            let c = a.add(&b).unwrap();
            prop_assert_eq!(c.shape(), &a_shape[..]);
            // oracle
            let rank = a_shape.len();
            let off = rank - b_shape.len();
            let mut idx = vec![0usize; rank];
            for flat in 0..na {
                let mut rem = flat;
                for ax in (0..rank).rev() { idx[ax] = rem % a_shape[ax]; rem /= a_shape[ax]; }
                let mut bflat = 0;
                for (k, &d) in b_shape.iter().enumerate() {
                    let i = if d == 1 { 0 } else { idx[off + k] };
                    bflat = bflat * d + i;
                }
                prop_assert_eq!(c.data()[flat], flat as f32 + 100.0 * bflat as f32);
            }
        }
    }
}
