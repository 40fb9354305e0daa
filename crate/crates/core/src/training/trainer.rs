use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::batch::{make_batch, Batch};
use super::optim::{clip_scale, global_grad_norm, AdamW, CosineSchedule};
use super::TrainConfig;
use crate::backbone::ModelConfig;
use crate::data::SeriesRecord;
use crate::error::{Error, Result};
use crate::fmt::g9;
use crate::model::SundialModel;
use crate::tensor::Tensor;
use crate::timeflow::no_targets;

/// Random streams derived from one seed: parameter init, batch sampling and
/// objective noise never share draws.
pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub const INIT_STREAM: u64 = 0;
pub const BATCH_STREAM: u64 = 1;
pub const NOISE_STREAM: u64 = 2;

/// A freshly initialized model drawn from the seed's init stream.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<SundialModel> {
    SundialModel::new(cfg, &mut seeded_stream(seed, INIT_STREAM))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// One-based update count.
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Representations and targets of every usable position in `batch`:
/// `([M, D], [M, F])`.
pub fn batch_rows(model: &SundialModel, batch: &Batch) -> Result<(Tensor, Tensor)> {
    let mut hs = Vec::new();
    let mut ys = Vec::new();
    for item in batch.items.iter().filter(|i| !i.positions.is_empty()) {
        hs.push(model.encode(&item.sample)?.index_select(&item.positions)?);
        ys.extend_from_slice(&item.targets);
    }
    if hs.is_empty() {
        return Err(no_targets());
    }
    let y = Tensor::from_vec(ys, &[hs.iter().map(|h| h.shape()[0]).sum(), batch.horizon])?;
    Ok((Tensor::concat(&hs, 0)?, y))
}

pub fn batch_loss<R: Rng + ?Sized>(model: &SundialModel, batch: &Batch, rng: &mut R) -> Result<Tensor> {
    let (h, y) = batch_rows(model, batch)?;
    model.loss(&h, &y, rng)
}

/// Forward, backward, clip and update. Returns the loss and the pre-clip
/// gradient norm.
#[allow(clippy::too_many_arguments)]
pub fn train_step<R: Rng + ?Sized>(
    model: &mut SundialModel,
    batch: &Batch,
    opt: &mut AdamW,
    lr: f64,
    clip_norm: f64,
    step: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let loss = batch_loss(model, batch, rng)?;
    let value = loss.item()? as f64;
    if !value.is_finite() {
        return Err(Error::Training {
            step,
            msg: format!("loss is {value}"),
        });
    }
    loss.backward()?;
    let norm = global_grad_norm(model);
    if !norm.is_finite() {
        return Err(Error::Training {
            step,
            msg: format!("gradient norm is {norm}"),
        });
    }
    opt.step(model, lr, clip_scale(norm, clip_norm))?;
    Ok((value, norm))
}

/// Full training run state.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub schedule: CosineSchedule,
    pub optimizer: AdamW,
    batch_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Self {
        Trainer {
            schedule: CosineSchedule::new(cfg.lr_peak, cfg.warmup_steps, cfg.steps),
            optimizer: AdamW::new(cfg.weight_decay),
            batch_rng: seeded_stream(cfg.seed, BATCH_STREAM),
            noise_rng: seeded_stream(cfg.seed, NOISE_STREAM),
            step: 0,
            cfg,
        }
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn next_batch(&mut self, model: &ModelConfig, corpus: &[SeriesRecord]) -> Result<Batch> {
        make_batch(corpus, model, &self.cfg, &mut self.batch_rng)
    }

    /// One update on `batch` at the current schedule position.
    pub fn step_on(&mut self, model: &mut SundialModel, batch: &Batch) -> Result<StepRecord> {
        let lr = self.schedule.lr(self.step);
        let (loss, grad_norm) = train_step(
            model,
            batch,
            &mut self.optimizer,
            lr,
            self.cfg.grad_clip_norm,
            self.step + 1,
            &mut self.noise_rng,
        )?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            loss,
            lr,
            grad_norm,
        })
    }

    /// Runs the remaining configured steps, handing each record to `on_step`.
    pub fn run(
        &mut self,
        model: &mut SundialModel,
        corpus: &[SeriesRecord],
        mut on_step: impl FnMut(&StepRecord) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        self.cfg.validate(&model.config)?;
        let mut records = Vec::with_capacity(self.cfg.steps.saturating_sub(self.step));
        while self.step < self.cfg.steps {
            let batch = self.next_batch(&model.config, corpus)?;
            let rec = self.step_on(model, &batch)?;
            on_step(&rec)?;
            records.push(rec);
        }
        Ok(records)
    }
}

/// Trains `model` for `cfg.steps` updates.
pub fn train(model: &mut SundialModel, corpus: &[SeriesRecord], cfg: &TrainConfig) -> Result<Vec<StepRecord>> {
    Trainer::new(cfg.clone()).run(model, corpus, |_| Ok(()))
}

/// Settings for continuing from trained weights: same schedule shape with a
/// tenth of the peak rate. The optimizer always starts fresh.
pub fn fine_tune_config(base: &TrainConfig) -> TrainConfig {
    TrainConfig {
        lr_peak: base.lr_peak / 10.0,
        ..base.clone()
    }
}

/// Continues training already-initialized weights with a fresh optimizer.
pub fn fine_tune(model: &mut SundialModel, corpus: &[SeriesRecord], cfg: &TrainConfig) -> Result<Vec<StepRecord>> {
    train(model, corpus, cfg)
}

/// Loss-curve writer: a `step,loss,lr,grad_norm` header, then one line per
/// update with nine significant digits.
pub struct LossLog<W: Write> {
    out: W,
}

impl<W: Write> LossLog<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "step,loss,lr,grad_norm")?;
        Ok(LossLog { out })
    }

    pub fn record(&mut self, r: &StepRecord) -> Result<()> {
        writeln!(self.out, "{},{},{},{}", r.step, g9(r.loss), g9(r.lr), g9(r.grad_norm))?;
        Ok(())
    }

    pub fn into_inner(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Centered moving average with window `w` (shrunk at the ends).
pub fn smooth(values: &[f64], w: usize) -> Vec<f64> {
    let half = w / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_corpus;

    fn tiny_setup() -> (ModelConfig, TrainConfig, Vec<SeriesRecord>) {
        let m = ModelConfig::tiny();
        let mut c = TrainConfig::for_model(&m);
        c.min_context = 16;
        c.max_context = 48;
        c.batch_size = 4;
        c.steps = 12;
        c.warmup_steps = 3;
        c.seed = 9;
        (m, c, synth_corpus(1, 6, 80, 3).unwrap())
    }

    fn log_text(m: &ModelConfig, c: &TrainConfig, corpus: &[SeriesRecord]) -> String {
        let mut model = init_model(m, c.seed).unwrap();
        let mut log = LossLog::new(Vec::new()).unwrap();
        Trainer::new(c.clone()).run(&mut model, corpus, |r| log.record(r)).unwrap();
        String::from_utf8(log.into_inner().unwrap()).unwrap()
    }

    #[test]
    fn loss_log_is_reproducible() {
        let (m, c, corpus) = tiny_setup();
        let a = log_text(&m, &c, &corpus);
        assert_eq!(a, log_text(&m, &c, &corpus));
        assert_eq!(a.lines().count(), c.steps + 1);
        assert!(a.starts_with("step,loss,lr,grad_norm\n1,"));
    }

    #[test]
    fn zero_steps_leave_weights_untouched() {
        let (m, mut c, corpus) = tiny_setup();
        c.steps = 0;
        let mut model = init_model(&m, 3).unwrap();
        let before = crate::layers::named_params(&model);
        fine_tune(&mut model, &corpus, &fine_tune_config(&c)).unwrap();
        let after = crate::layers::named_params(&model);
        for ((_, a), (_, b)) in before.iter().zip(&after) {
            assert_eq!(a.to_vec(), b.to_vec());
        }
    }

    #[test]
    fn repeated_batch_is_overfit() {
        let (m, mut c, corpus) = tiny_setup();
        c.lr_peak = 3e-3;
        c.warmup_steps = 5;
        c.steps = 100;
        c.objective = crate::backbone::HeadKind::Mse;
        let mut mc = m.clone();
        mc.head = crate::backbone::HeadKind::Mse;
        let mut model = init_model(&mc, 0).unwrap();
        let mut trainer = Trainer::new(c.clone());
        let batch = trainer.next_batch(&mc, &corpus).unwrap();
        let losses: Vec<f64> = (0..c.steps).map(|_| trainer.step_on(&mut model, &batch).unwrap().loss).collect();
        let s = smooth(&losses, 5);
        for w in (0..c.steps - 20).step_by(20) {
            assert!(s[w + 20] < s[w], "window at {w}: {} -> {}", s[w], s[w + 20]);
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_step() {
        let (m, c, _) = tiny_setup();
        // a flat context followed by an enormous jump overflows the loss
        let corpus = vec![SeriesRecord::new("huge", (0..20).map(|i| if i < 19 { 0.0 } else { 1e30 }).collect())];
        let mut model = init_model(&m, 0).unwrap();
        let mut cc = c.clone();
        cc.min_context = 16;
        cc.max_context = 16;
        let prev = crate::tensor::set_finite_checks(false);
        let res = train(&mut model, &corpus, &cc);
        crate::tensor::set_finite_checks(prev);
        match res {
            Err(Error::Training { step, .. }) => assert!(step >= 1),
            other => panic!("expected a training abort, got {other:?}"),
        }
    }
}
