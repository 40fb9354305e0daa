//! Ensemble summaries, rolling forecasts, forecast metrics and reports.

mod ensemble;
mod metrics;
mod rolling;

pub use ensemble::{check_levels, quantile, sorted_quantile, summarize, ForecastEnsemble, DEFAULT_LEVELS};
pub use metrics::{crps, crps_path, mase, mse_mae, pinball, season_for, wql, Metric};
pub use rolling::{roll, rolling_forecast, ModelSampler, RoundSampler};

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SeriesRecord;
use crate::error::{config, Error, Result};
use crate::fmt::g9;
use crate::model::SundialModel;

/// Settings of a held-out evaluation: the last `horizon` points of every
/// series are forecast from everything before them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub horizon: usize,
    pub members: usize,
    pub steps: usize,
    pub levels: Vec<f64>,
    pub metrics: Vec<Metric>,
    pub seed: u64,
}

impl EvalConfig {
    pub fn new(horizon: usize) -> Self {
        EvalConfig {
            horizon,
            members: 20,
            steps: 50,
            levels: DEFAULT_LEVELS.to_vec(),
            metrics: Metric::ALL.to_vec(),
            seed: 0,
        }
    }
}

/// Context and truth of a held-out split.
pub fn split_series(record: &SeriesRecord, horizon: usize) -> Result<(&[f64], &[f64])> {
    if horizon == 0 {
        return Err(config("evaluation horizon must be positive"));
    }
    if record.len() <= horizon {
        return Err(Error::Data(format!(
            "series {} has {} points, needs more than the horizon {horizon}",
            record.id,
            record.len()
        )));
    }
    Ok(record.values.split_at(record.len() - horizon))
}

/// Scores one ensemble. Point metrics use the median forecast. MASE falls
/// back to a period of one when the history is too short for the seasonal
/// period.
pub fn score(
    ens: &ForecastEnsemble,
    truth: &[f64],
    insample: &[f64],
    season: usize,
    metrics: &[Metric],
) -> Result<Vec<(Metric, f64)>> {
    let season = if insample.len() > season { season } else { 1 };
    metrics
        .iter()
        .map(|&m| {
            let v = match m {
                Metric::Mse => mse_mae(&ens.median, truth)?.0,
                Metric::Mae => mse_mae(&ens.median, truth)?.1,
                Metric::Mase => mase(&ens.median, truth, insample, season)?,
                Metric::Wql => wql(&ens.quantiles, truth, &ens.levels)?,
                Metric::Crps => crps_path(&ens.samples, truth)?,
            };
            Ok((m, v))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreRow {
    pub id: String,
    pub metric: Metric,
    pub value: f64,
}

/// Identifier of the aggregate rows in a report.
pub const AGGREGATE_ID: &str = "__mean__";

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Report {
    pub rows: Vec<ScoreRow>,
}

impl Report {
    /// Metrics in order of first appearance.
    pub fn metrics(&self) -> Vec<Metric> {
        let mut out: Vec<Metric> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.metric) {
                out.push(r.metric);
            }
        }
        out
    }

    /// Mean over series with a finite score, and how many were infinite.
    pub fn aggregate(&self, metric: Metric) -> (f64, usize) {
        let vals: Vec<f64> = self.rows.iter().filter(|r| r.metric == metric).map(|r| r.value).collect();
        let finite: Vec<f64> = vals.iter().copied().filter(|v| v.is_finite()).collect();
        let mean = if finite.is_empty() {
            f64::NAN
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        (mean, vals.len() - finite.len())
    }

    /// `id,metric,value` rows, then one aggregate row per metric. Infinite
    /// scores are written as `inf` and left out of the aggregate.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "id,metric,value")?;
        for r in &self.rows {
            writeln!(out, "{},{},{}", r.id, r.metric, g9(r.value))?;
        }
        for m in self.metrics() {
            writeln!(out, "{AGGREGATE_ID},{m},{}", g9(self.aggregate(m).0))?;
        }
        Ok(())
    }
}

/// Forecasts the held-out tail of every series and scores it. Series `i`
/// samples from its own random stream, so scores do not depend on which
/// other series are evaluated.
pub fn evaluate(model: &SundialModel, corpus: &[SeriesRecord], cfg: &EvalConfig) -> Result<Report> {
    check_levels(&cfg.levels)?;
    let mut report = Report::default();
    for (i, rec) in corpus.iter().enumerate() {
        let (context, truth) = split_series(rec, cfg.horizon)?;
        let mut rng = series_rng(cfg.seed, i);
        let ens = rolling_forecast(model, context, cfg.horizon, cfg.members, cfg.steps, &cfg.levels, &mut rng)?;
        for (metric, value) in score(&ens, truth, context, season_for(rec.freq.as_deref()), &cfg.metrics)? {
            report.rows.push(ScoreRow {
                id: rec.id.clone(),
                metric,
                value,
            });
        }
    }
    Ok(report)
}

/// Random stream of the `index`-th series under `seed`.
pub fn series_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index as u64);
    r
}

/// Header of the forecast file for `levels`.
pub fn forecast_header(levels: &[f64]) -> String {
    let mut h = String::from("id,step,mean");
    for q in levels {
        h.push_str(&format!(",q{}", g9(*q)));
    }
    h.push_str(",median");
    h
}

/// One line per horizon step: `id,step,mean,q…,median`, steps from 1.
pub fn write_forecast_rows<W: Write>(mut out: W, id: &str, ens: &ForecastEnsemble) -> Result<()> {
    for t in 0..ens.horizon() {
        write!(out, "{id},{},{}", t + 1, g9(ens.mean[t]))?;
        for q in &ens.quantiles {
            write!(out, ",{}", g9(q[t]))?;
        }
        writeln!(out, ",{}", g9(ens.median[t]))?;
    }
    Ok(())
}

/// Last-value persistence forecast.
pub fn persistence(context: &[f64], horizon: usize) -> Vec<f64> {
    vec![context.last().copied().unwrap_or(0.0); horizon]
}
