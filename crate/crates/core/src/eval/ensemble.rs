use serde::Serialize;

use crate::error::{contract, Result};

/// The nine deciles used for quantile outputs and weighted quantile loss.
pub const DEFAULT_LEVELS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Sampled trajectories and their per-step summaries, all in series units.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ForecastEnsemble {
    /// `S` rows of `H` points.
    pub samples: Vec<Vec<f64>>,
    pub levels: Vec<f64>,
    /// One `H`-vector per level.
    pub quantiles: Vec<Vec<f64>>,
    pub median: Vec<f64>,
    pub mean: Vec<f64>,
}

impl ForecastEnsemble {
    pub fn horizon(&self) -> usize {
        self.median.len()
    }

    pub fn members(&self) -> usize {
        self.samples.len()
    }

    /// Values of every member at horizon step `t`.
    pub fn column(&self, t: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s[t]).collect()
    }
}

/// Quantile of already sorted values, interpolating linearly between the
/// two closest order statistics.
pub fn sorted_quantile(sorted: &[f64], level: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * level;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(values: &[f64], level: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(contract("quantile of an empty sample"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(sorted_quantile(&v, level))
}

pub fn check_levels(levels: &[f64]) -> Result<()> {
    if levels.iter().any(|&q| !(q > 0.0 && q < 1.0)) {
        return Err(contract("quantile levels must lie strictly between 0 and 1"));
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(contract("quantile levels must be strictly increasing"));
    }
    Ok(())
}

/// Per-step quantiles, median and mean of `S × H` samples.
pub fn summarize(samples: Vec<Vec<f64>>, levels: &[f64]) -> Result<ForecastEnsemble> {
    check_levels(levels)?;
    let h = match samples.first() {
        Some(s) => s.len(),
        None => return Err(contract("cannot summarize an empty ensemble")),
    };
    if samples.iter().any(|s| s.len() != h) {
        return Err(contract("ensemble members differ in length"));
    }
    let mut quantiles = vec![Vec::with_capacity(h); levels.len()];
    let mut median = Vec::with_capacity(h);
    let mut mean = Vec::with_capacity(h);
    for t in 0..h {
        let mut col: Vec<f64> = samples.iter().map(|s| s[t]).collect();
        mean.push(col.iter().sum::<f64>() / col.len() as f64);
        col.sort_by(f64::total_cmp);
        for (q, out) in levels.iter().zip(quantiles.iter_mut()) {
            out.push(sorted_quantile(&col, *q));
        }
        median.push(sorted_quantile(&col, 0.5));
    }
    Ok(ForecastEnsemble {
        samples,
        levels: levels.to_vec(),
        quantiles,
        median,
        mean,
    })
}
