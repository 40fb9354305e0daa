use rand::RngCore;

use super::ensemble::{summarize, ForecastEnsemble};
use crate::backbone::KVCache;
use crate::error::{config, Error, Result};
use crate::model::SundialModel;
use crate::tensor::{no_grad, Tensor};
use crate::tokenizer::{normalize, patchify, NormStats, SeriesSample};

/// Source of forecast windows for rolling generation. Histories and
/// outputs are in series units.
pub trait RoundSampler {
    /// Points produced per round.
    fn horizon(&self) -> usize;
    /// `members` continuations of one shared history.
    fn sample_shared(&mut self, history: &[f64], members: usize) -> Result<Vec<Vec<f64>>>;
    /// One continuation of member `member`'s own history.
    fn sample_member(&mut self, member: usize, history: &[f64]) -> Result<Vec<f64>>;
}

/// Rolls `members` trajectories forward until `h_req` points exist, each
/// member conditioning on its own generated values. Returns the truncated
/// trajectories and the number of rounds.
pub fn roll<S: RoundSampler + ?Sized>(
    sampler: &mut S,
    context: &[f64],
    h_req: usize,
    members: usize,
) -> Result<(Vec<Vec<f64>>, usize)> {
    if context.is_empty() {
        return Err(Error::Input("forecast context is empty".into()));
    }
    if h_req == 0 {
        return Err(config("forecast horizon must be positive"));
    }
    if members == 0 {
        return Err(config("ensemble size must be positive"));
    }
    let f = sampler.horizon();
    let first = sampler.sample_shared(context, members)?;
    let mut paths: Vec<Vec<f64>> = first;
    let mut rounds = 1;
    while paths[0].len() < h_req {
        for (s, path) in paths.iter_mut().enumerate() {
            let mut history = context.to_vec();
            history.extend_from_slice(path);
            let next = sampler.sample_member(s, &history)?;
            debug_assert_eq!(next.len(), f);
            path.extend(next);
        }
        rounds += 1;
    }
    for p in &mut paths {
        p.truncate(h_req);
    }
    Ok((paths, rounds))
}

/// Model-backed sampler. Normalization statistics come from the original
/// context and stay fixed while members roll. Histories longer than the
/// model's context limit keep their most recent points.
pub struct ModelSampler<'a, R: RngCore + ?Sized> {
    model: &'a SundialModel,
    steps: usize,
    rng: &'a mut R,
    stats: Option<NormStats>,
    /// Per-member caches and the history length each one has consumed.
    caches: Option<Vec<(KVCache, usize)>>,
    use_cache: bool,
}

impl<'a, R: RngCore + ?Sized> ModelSampler<'a, R> {
    pub fn new(model: &'a SundialModel, steps: usize, rng: &'a mut R) -> Self {
        ModelSampler {
            model,
            steps,
            rng,
            stats: None,
            caches: None,
            use_cache: false,
        }
    }

    /// Reuses per-member key/value caches across rounds instead of
    /// re-encoding. Only honoured when every round appends whole patches
    /// and the final history still fits the context limit, so the cached
    /// and re-encoded representations coincide.
    pub fn with_cache(mut self, context_len: usize, h_req: usize) -> Self {
        let c = &self.model.config;
        let rounds = h_req.div_ceil(c.horizon);
        self.use_cache = c.kv_cache
            && c.horizon.is_multiple_of(c.patch_len)
            && context_len + (rounds - 1) * c.horizon <= c.max_context;
        self
    }

    fn window<'h>(&self, history: &'h [f64]) -> &'h [f64] {
        &history[history.len().saturating_sub(self.model.config.max_context)..]
    }

    fn denormalize(&self, z: &Tensor, stats: NormStats) -> Vec<Vec<f64>> {
        let f = self.model.config.horizon;
        z.data()
            .chunks(f)
            .map(|row| row.iter().map(|&v| stats.invert(v as f64)).collect())
            .collect()
    }

    fn last_row(h: &Tensor) -> Result<Tensor> {
        let n = h.shape()[0];
        h.narrow(0, n - 1, 1)?.reshape(&[h.shape()[1]])
    }
}

impl<R: RngCore + ?Sized> RoundSampler for ModelSampler<'_, R> {
    fn horizon(&self) -> usize {
        self.model.config.horizon
    }

    fn sample_shared(&mut self, history: &[f64], members: usize) -> Result<Vec<Vec<f64>>> {
        let window = self.window(history);
        let (_, stats) = normalize(window)?;
        self.stats = Some(stats);
        let sample = SeriesSample::with_stats(window, stats, self.model.config.patch_len)?;
        let h = no_grad(|| -> Result<Tensor> {
            if self.use_cache {
                let mut cache = self.model.new_cache();
                let h = self.model.encode_incremental(&sample.patches, &mut cache)?;
                self.caches = Some(vec![(cache, history.len()); members]);
                Ok(h)
            } else {
                self.model.encode(&sample)
            }
        })?;
        let z = self.model.generate(&Self::last_row(&h)?, members, self.steps, self.rng)?;
        Ok(self.denormalize(&z, stats))
    }

    fn sample_member(&mut self, member: usize, history: &[f64]) -> Result<Vec<f64>> {
        let stats = self
            .stats
            .ok_or_else(|| Error::State("member round before the shared round".into()))?;
        let p = self.model.config.patch_len;
        let model = self.model;
        let h = match &mut self.caches {
            Some(caches) => {
                let (cache, seen) = &mut caches[member];
                let fresh: Vec<f64> = history[*seen..].iter().map(|&v| stats.apply(v)).collect();
                *seen = history.len();
                no_grad(|| model.encode_incremental(&patchify(&fresh, p)?, cache))?
            }
            None => {
                let sample = SeriesSample::with_stats(self.window(history), stats, p)?;
                no_grad(|| model.encode(&sample))?
            }
        };
        let z = model.generate(&Self::last_row(&h)?, 1, self.steps, self.rng)?;
        Ok(self.denormalize(&z, stats).remove(0))
    }
}

/// `members` trajectories of `h_req` points after `context`, summarized at
/// `levels`.
pub fn rolling_forecast<R: RngCore + ?Sized>(
    model: &SundialModel,
    context: &[f64],
    h_req: usize,
    members: usize,
    steps: usize,
    levels: &[f64],
    rng: &mut R,
) -> Result<ForecastEnsemble> {
    super::ensemble::check_levels(levels)?;
    let mut sampler = ModelSampler::new(model, steps, rng);
    if h_req > 0 {
        sampler = sampler.with_cache(context.len().min(model.config.max_context), h_req);
    }
    let (paths, _) = roll(&mut sampler, context, h_req, members)?;
    summarize(paths, levels)
}
