//! Generative head: conditional flow matching over the next `F` points.
//!
//! Training regresses the network output at `y_t = t·y + (1−t)·y0` onto the
//! straight-line velocity `y − y0`. Sampling integrates the learned velocity
//! from Gaussian noise with `K` uniform Euler steps, reusing one backbone
//! representation for every ensemble member.

pub mod diffusion;
mod fmnet;
pub mod mse;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use fmnet::{time_features, FMNet, FlowBlock, VelocityField, TIME_FEATURES, TIME_SCALE};

use crate::error::{config, contract, Error, Result};
use crate::tensor::{no_grad, shape_err, Tensor};

/// `t·y + (1−t)·y0` with one `t` per row.
pub fn interpolate(y: &Tensor, y0: &Tensor, t: &Tensor) -> Result<Tensor> {
    if y.shape() != y0.shape() || y.rank() != 2 || t.numel() != y.shape()[0] {
        return Err(shape_err("interpolate", y.shape(), y0.shape()));
    }
    if let Some(bad) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(contract(format!("flow time {bad} is outside [0, 1]")));
    }
    let t = t.reshape(&[y.shape()[0], 1])?;
    let one_minus = t.neg().add_scalar(1.0);
    y.mul(&t)?.add(&y0.mul(&one_minus)?)
}

/// Standard normal `[rows, cols]` block drawn row-major from `rng`.
pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<Tensor> {
    let v: Vec<f32> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_vec(v, &[rows, cols])
}

pub(crate) fn no_targets() -> Error {
    Error::Data("no position has a full future window to train on".into())
}

/// Flow-matching loss for fixed flow times `t [M]` and noise `y0 [M,F]`:
/// mean squared difference between predicted and straight-line velocity.
pub fn timeflow_loss_with(
    net: &dyn VelocityField,
    h: &Tensor,
    y: &Tensor,
    t: &Tensor,
    y0: &Tensor,
) -> Result<Tensor> {
    if y.shape()[0] == 0 {
        return Err(no_targets());
    }
    let y_t = interpolate(y, y0, t)?;
    let v = net.forward(&y_t, t, h)?;
    Ok(v.sub(&y.sub(y0)?)?.square().mean_all())
}

/// Flow-matching loss with fresh `t ~ U[0,1]` and `y0 ~ N(0,I)` per row.
pub fn timeflow_loss<R: Rng + ?Sized>(net: &dyn VelocityField, h: &Tensor, y: &Tensor, rng: &mut R) -> Result<Tensor> {
    let (m, f) = (y.shape()[0], y.shape()[1]);
    if m == 0 {
        return Err(no_targets());
    }
    let t = Tensor::from_vec((0..m).map(|_| rng.random::<f32>()).collect(), &[m])?;
    let y0 = gaussian(m, f, rng)?;
    timeflow_loss_with(net, h, y, &t, &y0)
}

/// Independent generator for ensemble member `member` of a draw seeded with
/// `stream_seed`. Members never share state, so batched and one-at-a-time
/// generation agree.
pub fn member_rng(stream_seed: u64, member: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(stream_seed);
    r.set_stream(member as u64);
    r
}

/// `[S, F]` initial noise, row `s` from [`member_rng`].
pub fn member_noise(stream_seed: u64, members: usize, f: usize) -> Result<Tensor> {
    let mut v = Vec::with_capacity(members * f);
    for s in 0..members {
        let mut r = member_rng(stream_seed, s);
        v.extend((0..f).map(|_| r.sample::<f32, _>(StandardNormal)));
    }
    Tensor::from_vec(v, &[members, f])
}

/// Repeats a `[D]` or `[1, D]` condition into `[rows, D]`.
pub(crate) fn repeat_condition(h: &Tensor, rows: usize) -> Result<Tensor> {
    let d = *h.shape().last().ok_or_else(|| shape_err("condition", h.shape(), &[]))?;
    if h.numel() != d {
        return Err(shape_err("condition", h.shape(), &[d]));
    }
    h.reshape(&[1, d])?.index_select(&vec![0; rows])
}

/// Euler integration of `dy/dt = net(y, t, h)` from `y0` over `steps`
/// uniform steps on `[0, 1]`.
pub fn push_forward(net: &dyn VelocityField, h: &Tensor, y0: &Tensor, steps: usize) -> Result<Tensor> {
    if steps == 0 {
        return Err(config("sampling needs at least one step"));
    }
    let rows = y0.shape()[0];
    let dt = 1.0 / steps as f64;
    // the trajectory is accumulated in f64 so long step counts do not drift
    let mut y: Vec<f64> = y0.data().iter().map(|&v| v as f64).collect();
    no_grad(|| {
        let mut y_t = y0.clone();
        for k in 0..steps {
            let t = Tensor::full(&[rows], (k as f64 * dt) as f32);
            let v = net.forward(&y_t, &t, h)?;
            for (yi, &vi) in y.iter_mut().zip(v.data()) {
                *yi += vi as f64 * dt;
            }
            y_t = Tensor::from_vec(y.iter().map(|&v| v as f32).collect(), y0.shape())?;
        }
        Ok(y_t)
    })
}

/// `S` forecasts `[S, F]` in normalized units, all conditioned on the one
/// representation `h`. Only a single `u64` is consumed from `rng`.
pub fn sample_ensemble<R: RngCore + ?Sized>(
    net: &dyn VelocityField,
    h: &Tensor,
    members: usize,
    steps: usize,
    rng: &mut R,
) -> Result<Tensor> {
    if members == 0 {
        return Err(config("ensemble size must be positive"));
    }
    if steps == 0 {
        return Err(config("sampling needs at least one step"));
    }
    let stream_seed = rng.next_u64();
    let y0 = member_noise(stream_seed, members, net.horizon())?;
    push_forward(net, &repeat_condition(h, members)?, &y0, steps)
}

/// A single forecast; identical to a one-member [`sample_ensemble`].
pub fn sample_one<R: RngCore + ?Sized>(
    net: &dyn VelocityField,
    h: &Tensor,
    steps: usize,
    rng: &mut R,
) -> Result<Vec<f32>> {
    Ok(sample_ensemble(net, h, 1, steps, rng)?.to_vec())
}

#[cfg(test)]
pub(crate) mod stubs {
    use super::*;

    /// Returns `f(y_t, t)` row-wise, ignoring the condition.
    pub struct Stub<F: Fn(&[f32], f32) -> Vec<f32>> {
        pub f: F,
        pub horizon: usize,
    }

    impl<F: Fn(&[f32], f32) -> Vec<f32>> VelocityField for Stub<F> {
        fn forward(&self, y_t: &Tensor, t: &Tensor, _h: &Tensor) -> Result<Tensor> {
            let mut out = Vec::new();
            for (row, &ti) in y_t.data().chunks(self.horizon).zip(t.data()) {
                out.extend((self.f)(row, ti));
            }
            Tensor::from_vec(out, y_t.shape())
        }

        fn horizon(&self) -> usize {
            self.horizon
        }
    }
}
