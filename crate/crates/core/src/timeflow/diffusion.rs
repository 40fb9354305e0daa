//! Denoising-diffusion alternative to flow matching: the same conditional
//! network predicts the injected noise under a cosine schedule, and a strided
//! ancestral sampler generates forecasts.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use super::{gaussian, member_rng, no_targets, repeat_condition, VelocityField};
use crate::error::{config, Result};
use crate::tensor::{no_grad, Tensor};

/// Training timesteps of the noise schedule.
pub const TRAIN_STEPS: usize = 1000;
/// Default number of sampling steps.
pub const SAMPLE_STEPS: usize = 50;
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Cumulative signal fractions `ᾱ_τ` for `τ = 0..=TRAIN_STEPS`, `ᾱ_0 = 1`.
#[derive(Clone, Debug)]
pub struct Schedule {
    alpha_bar: Vec<f64>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self::cosine(TRAIN_STEPS)
    }
}

impl Schedule {
    pub fn cosine(steps: usize) -> Self {
        let f = |tau: usize| {
            let x = (tau as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let mut alpha_bar = vec![1.0];
        for tau in 1..=steps {
            let beta = (1.0 - f(tau) / f(tau - 1)).min(MAX_BETA);
            alpha_bar.push(alpha_bar[tau - 1] * (1.0 - beta));
        }
        Schedule { alpha_bar }
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, tau: usize) -> f64 {
        self.alpha_bar[tau]
    }

    /// Network time input for timestep `tau`.
    pub fn time(&self, tau: usize) -> f32 {
        (tau as f64 / self.steps() as f64) as f32
    }

    /// `sample_steps + 1` decreasing timesteps from `TRAIN_STEPS` to 0.
    pub fn strided(&self, sample_steps: usize) -> Vec<usize> {
        (0..=sample_steps)
            .rev()
            .map(|i| (i as f64 * self.steps() as f64 / sample_steps as f64).round() as usize)
            .collect()
    }
}

/// Noise-prediction loss for given timesteps `tau [M]` (each in
/// `1..=TRAIN_STEPS`) and noise `eps [M,F]`.
pub fn diffusion_loss_with(
    net: &dyn VelocityField,
    schedule: &Schedule,
    h: &Tensor,
    y: &Tensor,
    tau: &[usize],
    eps: &Tensor,
) -> Result<Tensor> {
    let m = y.shape()[0];
    if m == 0 {
        return Err(no_targets());
    }
    if tau.len() != m || tau.iter().any(|&s| s == 0 || s > schedule.steps()) {
        return Err(config("diffusion timesteps must lie in 1..=steps, one per row"));
    }
    let signal: Vec<f32> = tau.iter().map(|&s| schedule.alpha_bar(s).sqrt() as f32).collect();
    let noise: Vec<f32> = tau.iter().map(|&s| (1.0 - schedule.alpha_bar(s)).sqrt() as f32).collect();
    let signal = Tensor::from_vec(signal, &[m, 1])?;
    let noise = Tensor::from_vec(noise, &[m, 1])?;
    let x = y.mul(&signal)?.add(&eps.mul(&noise)?)?;
    let t = Tensor::from_vec(tau.iter().map(|&s| schedule.time(s)).collect(), &[m])?;
    Ok(net.forward(&x, &t, h)?.sub(eps)?.square().mean_all())
}

/// Noise-prediction loss with uniformly drawn timesteps and fresh noise.
pub fn diffusion_loss<R: Rng + ?Sized>(
    net: &dyn VelocityField,
    schedule: &Schedule,
    h: &Tensor,
    y: &Tensor,
    rng: &mut R,
) -> Result<Tensor> {
    let (m, f) = (y.shape()[0], y.shape()[1]);
    if m == 0 {
        return Err(no_targets());
    }
    let tau: Vec<usize> = (0..m).map(|_| rng.random_range(1..=schedule.steps())).collect();
    let eps = gaussian(m, f, rng)?;
    diffusion_loss_with(net, schedule, h, y, &tau, &eps)
}

/// `S` forecasts `[S, F]` by ancestral sampling over `sample_steps` strided
/// timesteps. Each member draws all its noise from its own stream.
pub fn diffusion_sample<R: RngCore + ?Sized>(
    net: &dyn VelocityField,
    schedule: &Schedule,
    h: &Tensor,
    members: usize,
    sample_steps: usize,
    rng: &mut R,
) -> Result<Tensor> {
    if members == 0 || sample_steps == 0 {
        return Err(config("ensemble size and step count must be positive"));
    }
    let f = net.horizon();
    let stream_seed = rng.next_u64();
    let mut streams: Vec<_> = (0..members).map(|s| member_rng(stream_seed, s)).collect();
    let draw = |streams: &mut Vec<rand_chacha::ChaCha8Rng>| -> Vec<f64> {
        streams
            .iter_mut()
            .flat_map(|r| (0..f).map(|_| r.sample::<f32, _>(StandardNormal) as f64).collect::<Vec<_>>())
            .collect()
    };
    let h = repeat_condition(h, members)?;
    let taus = schedule.strided(sample_steps);
    no_grad(|| {
        let mut x = draw(&mut streams);
        for w in taus.windows(2) {
            let (tau, prev) = (w[0], w[1]);
            let (ab, ab_prev) = (schedule.alpha_bar(tau), schedule.alpha_bar(prev));
            let xt = Tensor::from_vec(x.iter().map(|&v| v as f32).collect(), &[members, f])?;
            let t = Tensor::full(&[members], schedule.time(tau));
            let eps = net.forward(&xt, &t, &h)?;
            let var = (1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev);
            let dir = (1.0 - ab_prev - var).max(0.0).sqrt();
            let z = if prev > 0 { draw(&mut streams) } else { vec![0.0; x.len()] };
            for ((xi, &e), zi) in x.iter_mut().zip(eps.data()).zip(z) {
                let x0 = (*xi - (1.0 - ab).sqrt() * e as f64) / ab.sqrt();
                *xi = ab_prev.sqrt() * x0 + dir * e as f64 + var.sqrt() * zi;
            }
        }
        Tensor::from_vec(x.iter().map(|&v| v as f32).collect(), &[members, f])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeflow::stubs::Stub;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_is_monotone_from_one_to_near_zero() {
        let s = Schedule::default();
        assert_eq!(s.alpha_bar(0), 1.0);
        for tau in 1..=s.steps() {
            assert!(s.alpha_bar(tau) < s.alpha_bar(tau - 1));
        }
        assert!(s.alpha_bar(s.steps()) < 1e-4);
        let strided = s.strided(50);
        assert_eq!((strided[0], strided[50], strided.len()), (1000, 0, 51));
    }

    #[test]
    fn predicting_the_noise_gives_zero_loss() {
        struct Known(Vec<f32>);
        impl VelocityField for Known {
            fn forward(&self, y_t: &Tensor, _: &Tensor, _: &Tensor) -> Result<Tensor> {
                Tensor::from_vec(self.0.clone(), y_t.shape())
            }
            fn horizon(&self) -> usize {
                2
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eps = gaussian(3, 2, &mut rng).unwrap();
        let y = gaussian(3, 2, &mut rng).unwrap();
        let loss = diffusion_loss_with(
            &Known(eps.to_vec()),
            &Schedule::default(),
            &Tensor::zeros(&[3, 1]),
            &y,
            &[1, 500, 1000],
            &eps,
        )
        .unwrap();
        assert_eq!(loss.item().unwrap(), 0.0);
    }

    #[test]
    fn sampler_recovers_a_point_mass() {
        // the optimal noise predictor for data fixed at c is (x − √ᾱ c)/√(1−ᾱ)
        let s = Schedule::default();
        let c = 1.5f64;
        let sched = s.clone();
        let net = Stub {
            f: move |r: &[f32], t| {
                let tau = (t as f64 * sched.steps() as f64).round() as usize;
                let ab = sched.alpha_bar(tau);
                r.iter().map(|&x| ((x as f64 - ab.sqrt() * c) / (1.0 - ab).sqrt()) as f32).collect()
            },
            horizon: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = diffusion_sample(&net, &s, &Tensor::zeros(&[1]), 4, SAMPLE_STEPS, &mut rng).unwrap();
        assert!(out.data().iter().all(|&v| (v as f64 - c).abs() < 1e-3), "{:?}", out.data());
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = Schedule::default();
        let net = Stub {
            f: |r: &[f32], _| r.iter().map(|v| 0.5 * v).collect(),
            horizon: 2,
        };
        let a = diffusion_sample(&net, &s, &Tensor::zeros(&[1]), 3, 10, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = diffusion_sample(&net, &s, &Tensor::zeros(&[1]), 3, 10, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }
}
