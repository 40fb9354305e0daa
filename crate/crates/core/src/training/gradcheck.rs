//! Analytic gradients of the flow-matching loss against central differences
//! of an independent double-precision forward pass.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::batch::{make_item, TrainItem};
use crate::backbone::{HeadKind, ModelConfig};
use crate::error::{config, Result};
use crate::layers::{named_params, Module};
use crate::model::{Head, SundialModel};
use crate::reference::{self, ParamMap, RefItem};
use crate::tensor::Tensor;
use crate::timeflow::{gaussian, timeflow_loss_with};
use crate::tokenizer::PatchEmbed;

use super::trainer::{batch_rows, seeded_stream, INIT_STREAM, NOISE_STREAM};
use super::Batch;

/// Relative errors below this magnitude are attributed to single-precision
/// rounding in the analytic pass rather than to a wrong derivative.
pub const ABS_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `name[index]` of the worst entry.
    pub worst: String,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    /// Parameters whose analytic gradient is identically zero.
    pub zero_grad_params: Vec<String>,
    /// Largest finite difference among entries of `zero_grad_params`.
    pub max_numeric_on_zero: f64,
    pub loss_f32: f64,
    pub loss_f64: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Replaces every parameter with a well-scaled random draw so that no
/// gradient vanishes because of zero initialization: matrices get
/// `N(0, 1/fan_in)`, vectors are perturbed by `N(0, 0.2²)`.
pub fn randomize<R: Rng + ?Sized>(model: &mut dyn Module, rng: &mut R) {
    model.visit_mut("", &mut |_, t| {
        let shape = t.shape().to_vec();
        let old = t.to_vec();
        let v: Vec<f32> = if shape.len() >= 2 {
            let std = 1.0 / (shape[0] as f64).sqrt();
            (0..old.len()).map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32).collect()
        } else {
            old.iter().map(|&x| x + (rng.sample::<f64, _>(StandardNormal) * 0.2) as f32).collect()
        };
        *t = Tensor::param(v, &shape).expect("shape unchanged");
    });
}

/// Relative error with a magnitude floor.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Fixed inputs of one check: items, flow times and noise.
pub struct Probe {
    pub items: Vec<TrainItem>,
    pub t: Vec<f32>,
    pub y0: Vec<f32>,
}

impl Probe {
    /// Two windows of a smooth random series: one padded, one patch-aligned.
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let p = cfg.patch_len;
        let len = 5 * p + cfg.horizon;
        let series: Vec<f64> = (0..len)
            .map(|i| (i as f64 * 0.4).sin() * 2.0 + rng.sample::<f64, _>(StandardNormal) * 0.3)
            .collect();
        let items = vec![
            make_item(&series, 0, 0, 3 * p + p / 2, cfg)?,
            make_item(&series, 0, 2, 5 * p - 2, cfg)?,
        ];
        Self::with_items(cfg, items, rng)
    }

    pub fn with_items<R: Rng + ?Sized>(cfg: &ModelConfig, items: Vec<TrainItem>, rng: &mut R) -> Result<Self> {
        let m: usize = items.iter().map(|i| i.positions.len()).sum();
        let t = (0..m).map(|_| rng.random::<f32>()).collect();
        let y0 = gaussian(m, cfg.horizon, rng)?.to_vec();
        Ok(Probe { items, t, y0 })
    }

    fn targets(&self) -> Vec<f64> {
        self.items.iter().flat_map(|i| i.targets.iter().map(|&v| v as f64)).collect()
    }

    fn ref_items(&self) -> Result<Vec<RefItem>> {
        self.items
            .iter()
            .map(|it| {
                Ok(RefItem {
                    rows: PatchEmbed::input_rows(&it.sample.patches)?.data().iter().map(|&v| v as f64).collect(),
                    n_tokens: it.sample.n_tokens(),
                    positions: it.positions.clone(),
                })
            })
            .collect()
    }
}

fn analytic(model: &SundialModel, probe: &Probe) -> Result<f64> {
    let net = match &model.head {
        Head::TimeFlow(net) => net,
        _ => return Err(config("gradient check needs the flow-matching head")),
    };
    let batch = Batch {
        items: probe.items.clone(),
        horizon: model.config.horizon,
    };
    let (h, y) = batch_rows(model, &batch)?;
    let m = y.shape()[0];
    let t = Tensor::from_vec(probe.t.clone(), &[m])?;
    let y0 = Tensor::from_vec(probe.y0.clone(), &[m, model.config.horizon])?;
    let loss = timeflow_loss_with(net, &h, &y, &t, &y0)?;
    loss.backward()?;
    Ok(loss.item()? as f64)
}

/// Compares `samples` randomly chosen gradient entries of `model` on
/// `probe` with central differences of step `h` (relative to each
/// parameter's magnitude, at least `h`).
pub fn grad_check_on<R: Rng + ?Sized>(
    model: &SundialModel,
    probe: &Probe,
    samples: usize,
    h: f64,
    tolerance: f64,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let cfg = &model.config;
    for (_, p) in named_params(model) {
        p.zero_grad();
    }
    let loss_f32 = analytic(model, probe)?;
    let params = named_params(model);
    let grads: Vec<Vec<f32>> = params
        .iter()
        .map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    let zero_grad_params: Vec<String> = params
        .iter()
        .zip(&grads)
        .filter(|(_, g)| g.iter().all(|&v| v == 0.0))
        .map(|((n, _), _)| n.clone())
        .collect();

    let mut map: ParamMap = reference::param_map(model);
    let items = probe.ref_items()?;
    let y = probe.targets();
    let t: Vec<f64> = probe.t.iter().map(|&v| v as f64).collect();
    let y0: Vec<f64> = probe.y0.iter().map(|&v| v as f64).collect();
    let loss_f64 = reference::timeflow_loss(cfg, &map, &items, &y, &t, &y0)?;

    // every zero-gradient parameter gets probed in full; the rest is sampled
    let mut entries: Vec<(usize, usize)> = Vec::new();
    for (k, (name, p)) in params.iter().enumerate() {
        if zero_grad_params.contains(name) {
            entries.extend((0..p.numel()).map(|i| (k, i)));
        }
    }
    let all: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .filter(|(_, (n, _))| !zero_grad_params.contains(n))
        .flat_map(|(k, (_, p))| (0..p.numel()).map(move |i| (k, i)))
        .collect();
    // one entry from every remaining tensor first, then uniform draws
    for (k, (n, p)) in params.iter().enumerate() {
        if !zero_grad_params.contains(n) {
            entries.push((k, rng.random_range(0..p.numel())));
        }
    }
    while entries.len() < samples && !all.is_empty() {
        entries.push(*all.choose(rng).expect("non-empty"));
    }

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: String::new(),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        zero_grad_params,
        max_numeric_on_zero: 0.0,
        loss_f32,
        loss_f64,
        tolerance,
        passed: false,
    };
    for (k, i) in entries {
        let name = &params[k].0;
        let orig = map[name][i];
        let step = h * orig.abs().max(1.0);
        map.get_mut(name).expect("known")[i] = orig + step;
        let up = reference::timeflow_loss(cfg, &map, &items, &y, &t, &y0)?;
        map.get_mut(name).expect("known")[i] = orig - step;
        let down = reference::timeflow_loss(cfg, &map, &items, &y, &t, &y0)?;
        map.get_mut(name).expect("known")[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = grads[k][i] as f64;
        if report.zero_grad_params.contains(name) {
            report.max_numeric_on_zero = report.max_numeric_on_zero.max(numeric.abs());
        }
        let e = rel_error(a, numeric);
        if e > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = e;
            report.worst = format!("{name}[{i}]");
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
        report.checked += 1;
    }
    report.passed = report.max_rel_error < tolerance && report.max_numeric_on_zero == 0.0;
    Ok(report)
}

/// Full check on a freshly seeded, randomized model with the
/// flow-matching head.
pub fn grad_check(cfg: &ModelConfig, seed: u64, samples: usize, tolerance: f64) -> Result<GradCheckReport> {
    let mut cfg = cfg.clone();
    cfg.head = HeadKind::TimeFlow;
    let mut init = seeded_stream(seed, INIT_STREAM);
    let mut model = SundialModel::new(&cfg, &mut init)?;
    randomize(&mut model, &mut init);
    let mut noise = seeded_stream(seed, NOISE_STREAM);
    let probe = Probe::new(&cfg, &mut noise)?;
    grad_check_on(&model, &probe, samples, 1e-5, tolerance, &mut noise)
}
