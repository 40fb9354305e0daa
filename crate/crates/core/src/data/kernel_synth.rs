//! Synthetic series drawn from Gaussian processes with randomly composed
//! kernels.

use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::SeriesRecord;
use crate::error::{config, Error, Result};

/// Diagonal jitter added when a covariance is not numerically positive definite.
pub const JITTER: f64 = 1e-6;
/// Kernel redraws before giving up.
pub const MAX_REDRAWS: usize = 10;
/// Upper bound on the number of composed kernels.
pub const MAX_KERNELS: usize = 5;

const PERIODS: [f64; 10] = [4.0, 7.0, 12.0, 24.0, 30.0, 48.0, 52.0, 96.0, 168.0, 365.0];
const LENGTH_FRACTIONS: [f64; 4] = [0.02, 0.05, 0.1, 0.25];
const WHITE_VARIANCES: [f64; 3] = [0.01, 0.1, 1.0];

#[derive(Clone, Debug, PartialEq)]
pub enum Kernel {
    /// `(x − c)(x′ − c) / n²` for series length `n`.
    Linear { offset: f64 },
    /// `exp(−(x − x′)² / 2ℓ²)`
    Rbf { length: f64 },
    /// `exp(−2 sin²(π|x − x′|/p))`
    Periodic { period: f64 },
    /// `σ² δ(x, x′)`
    White { variance: f64 },
    Sum(Box<Kernel>, Box<Kernel>),
    Product(Box<Kernel>, Box<Kernel>),
}

impl Kernel {
    pub fn eval(&self, x: f64, y: f64, n: f64) -> f64 {
        match self {
            Kernel::Linear { offset } => (x - offset) * (y - offset) / (n * n),
            Kernel::Rbf { length } => (-(x - y).powi(2) / (2.0 * length * length)).exp(),
            Kernel::Periodic { period } => {
                let s = (std::f64::consts::PI * (x - y).abs() / period).sin();
                (-2.0 * s * s).exp()
            }
            Kernel::White { variance } => {
                if x == y {
                    *variance
                } else {
                    0.0
                }
            }
            Kernel::Sum(a, b) => a.eval(x, y, n) + b.eval(x, y, n),
            Kernel::Product(a, b) => a.eval(x, y, n) * b.eval(x, y, n),
        }
    }

    /// Covariance over inputs `0, 1, .., n−1`.
    pub fn covariance(&self, n: usize) -> DMatrix<f64> {
        let nf = n as f64;
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.eval(i as f64, j as f64, nf);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    /// One kernel from the bank with randomized hyperparameters.
    pub fn random_base<R: Rng + ?Sized>(length: usize, rng: &mut R) -> Kernel {
        let n = length as f64;
        match rng.random_range(0..4) {
            0 => Kernel::Linear {
                offset: rng.random_range(0.0..n),
            },
            1 => Kernel::Rbf {
                length: n * LENGTH_FRACTIONS.choose(rng).unwrap(),
            },
            2 => {
                let fitting: Vec<f64> = PERIODS.iter().copied().filter(|&p| p <= n / 2.0).collect();
                let period = fitting.choose(rng).copied().unwrap_or(n / 2.0);
                Kernel::Periodic { period }
            }
            _ => Kernel::White {
                variance: *WHITE_VARIANCES.choose(rng).unwrap(),
            },
        }
    }

    /// `1..=max_kernels` bank kernels folded together by random `+` or `×`.
    pub fn random_composite<R: Rng + ?Sized>(length: usize, max_kernels: usize, rng: &mut R) -> Kernel {
        let count = rng.random_range(1..=max_kernels);
        let mut k = Self::random_base(length, rng);
        for _ in 1..count {
            let next = Self::random_base(length, rng);
            k = if rng.random_bool(0.5) {
                Kernel::Sum(Box::new(k), Box::new(next))
            } else {
                Kernel::Product(Box::new(k), Box::new(next))
            };
        }
        k
    }
}

fn standardize(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(std > 1e-8) || !std.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|x| *x = (*x - mean) / std);
    Some(v)
}

/// One standardized path from the zero-mean process with covariance `kernel`.
/// Returns `None` when the covariance stays indefinite after jitter or the
/// path is degenerate.
pub fn sample_path<R: Rng + ?Sized>(kernel: &Kernel, length: usize, rng: &mut R) -> Option<Vec<f64>> {
    let k = kernel.covariance(length);
    let chol = k.clone().cholesky().or_else(|| {
        let jittered = k + DMatrix::identity(length, length) * JITTER;
        jittered.cholesky()
    })?;
    let z = DVector::from_iterator(length, (0..length).map(|_| rng.sample::<f64, _>(StandardNormal)));
    standardize((chol.l() * z).iter().copied().collect())
}

/// A standardized synthetic series of `length` points from a random kernel
/// composition, deterministic in `seed`.
pub fn kernel_synth(seed: u64, length: usize, max_kernels: usize) -> Result<SeriesRecord> {
    if length < 16 {
        return Err(config(format!("synthetic series need at least 16 points, got {length}")));
    }
    if max_kernels == 0 || max_kernels > MAX_KERNELS {
        return Err(config(format!("max_kernels must be in 1..={MAX_KERNELS}, got {max_kernels}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_REDRAWS {
        let kernel = Kernel::random_composite(length, max_kernels, &mut rng);
        if let Some(values) = sample_path(&kernel, length, &mut rng) {
            return Ok(SeriesRecord::new(format!("synth-{seed}"), values));
        }
    }
    Err(Error::Data(format!(
        "no positive-definite kernel composition after {MAX_REDRAWS} draws (seed {seed})"
    )))
}

/// `count` series with consecutive seeds starting at `seed`.
pub fn synth_corpus(seed: u64, count: usize, length: usize, max_kernels: usize) -> Result<Vec<SeriesRecord>> {
    (0..count as u64).map(|i| kernel_synth(seed.wrapping_add(i), length, max_kernels)).collect()
}
