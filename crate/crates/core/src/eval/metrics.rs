use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

fn same_len(op: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(contract(format!("{op}: prediction has {a} points, truth {b}")));
    }
    if a == 0 {
        return Err(contract(format!("{op}: empty input")));
    }
    Ok(())
}

/// Mean squared and mean absolute error.
pub fn mse_mae(pred: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    same_len("mse_mae", pred.len(), truth.len())?;
    let n = pred.len() as f64;
    let (sq, abs) = pred.iter().zip(truth).fold((0.0, 0.0), |(s, a), (p, y)| {
        let d = p - y;
        (s + d * d, a + d.abs())
    });
    Ok((sq / n, abs / n))
}

/// Seasonal period implied by a frequency tag; unknown tags are
/// non-seasonal.
pub fn season_for(freq: Option<&str>) -> usize {
    match freq.map(|f| f.trim().to_ascii_lowercase()) {
        Some(f) if f == "h" || f == "hourly" => 24,
        Some(f) if f == "d" || f == "daily" => 7,
        Some(f) if f == "w" || f == "weekly" => 52,
        _ => 1,
    }
}

/// MAE scaled by the in-sample seasonal-naive MAE. A constant seasonal
/// history yields `+inf`.
pub fn mase(pred: &[f64], truth: &[f64], insample: &[f64], m: usize) -> Result<f64> {
    if m == 0 || insample.len() <= m {
        return Err(contract(format!(
            "mase needs more than {m} in-sample points, got {}",
            insample.len()
        )));
    }
    let (_, mae) = mse_mae(pred, truth)?;
    let scale = insample.windows(m + 1).map(|w| (w[m] - w[0]).abs()).sum::<f64>() / (insample.len() - m) as f64;
    if scale == 0.0 {
        return Ok(if mae == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok(mae / scale)
}

/// Pinball loss of forecast `pred` at level `q` for outcome `y`.
pub fn pinball(q: f64, pred: f64, y: f64) -> f64 {
    let d = y - pred;
    (q * d).max((q - 1.0) * d)
}

/// Weighted quantile loss: for each level, twice the summed pinball loss
/// over the summed absolute truth, then averaged over levels. An all-zero
/// truth yields `+inf`.
pub fn wql(quantiles: &[Vec<f64>], truth: &[f64], levels: &[f64]) -> Result<f64> {
    if quantiles.len() != levels.len() || levels.is_empty() {
        return Err(contract(format!(
            "wql: {} quantile rows for {} levels",
            quantiles.len(),
            levels.len()
        )));
    }
    for q in quantiles {
        same_len("wql", q.len(), truth.len())?;
    }
    let denom: f64 = truth.iter().map(|y| y.abs()).sum();
    let total: f64 = levels
        .iter()
        .zip(quantiles)
        .map(|(&q, row)| row.iter().zip(truth).map(|(&p, &y)| 2.0 * pinball(q, p, y)).sum::<f64>())
        .sum();
    if denom == 0.0 {
        return Ok(if total == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok(total / denom / levels.len() as f64)
}

/// Energy-form sample CRPS: `mean|X − y| − ½·mean|X − X′|` over all
/// ordered member pairs, computed from the sorted sample in `O(S log S)`.
pub fn crps(samples: &[f64], truth: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(contract("crps of an empty ensemble"));
    }
    let s = samples.len() as f64;
    let first = samples.iter().map(|x| (x - truth).abs()).sum::<f64>() / s;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Σ_{i,j} |x_i − x_j| = 2 Σ_i (2i − S + 1) x_(i)
    let pairs: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 - s + 1.0) * x)
        .sum::<f64>()
        * 2.0;
    Ok(first - 0.5 * pairs / (s * s))
}

/// CRPS averaged over horizon steps; `samples` holds `S` rows of `H`.
pub fn crps_path(samples: &[Vec<f64>], truth: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(contract("crps of an empty ensemble"));
    }
    for s in samples {
        same_len("crps", s.len(), truth.len())?;
    }
    let mut total = 0.0;
    for (t, &y) in truth.iter().enumerate() {
        let col: Vec<f64> = samples.iter().map(|s| s[t]).collect();
        total += crps(&col, y)?;
    }
    Ok(total / truth.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Mse,
    Mae,
    Mase,
    Wql,
    Crps,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Mse, Metric::Mae, Metric::Mase, Metric::Wql, Metric::Crps];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Mse => "mse",
            Metric::Mae => "mae",
            Metric::Mase => "mase",
            Metric::Wql => "wql",
            Metric::Crps => "crps",
        }
    }

    /// Parses a comma-separated list such as `mse,crps`.
    pub fn parse_list(s: &str) -> Result<Vec<Metric>> {
        s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown metric {s:?} (expected mse, mae, mase, wql or crps)")))
    }
}
