use rand::Rng;

use super::TrainConfig;
use crate::backbone::ModelConfig;
use crate::data::SeriesRecord;
use crate::error::{Error, Result};
use crate::tokenizer::{normalize, SeriesSample};

/// One context window and the future window after each usable patch.
#[derive(Clone, Debug)]
pub struct TrainItem {
    /// Index of the source series in the corpus.
    pub series: usize,
    /// Start of the context window in the source series.
    pub offset: usize,
    pub sample: SeriesSample,
    /// Token indices that carry a full `F`-point target.
    pub positions: Vec<usize>,
    /// Row-major `positions.len() × F` normalized targets.
    pub targets: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub items: Vec<TrainItem>,
    pub horizon: usize,
}

impl Batch {
    /// Target rows across all items.
    pub fn rows(&self) -> usize {
        self.items.iter().map(|i| i.positions.len()).sum()
    }
}

/// Builds the item for a context window `series[offset..offset+len]`.
pub fn make_item(series: &[f64], index: usize, offset: usize, len: usize, model: &ModelConfig) -> Result<TrainItem> {
    let context = &series[offset..offset + len];
    let (_, stats) = normalize(context)?;
    let sample = SeriesSample::with_stats(context, stats, model.patch_len)?;
    let f = model.horizon;
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for i in 0..sample.n_tokens() {
        let end = offset + sample.patches.token_end(i);
        if end + f <= series.len() {
            positions.push(i);
            targets.extend(series[end..end + f].iter().map(|&v| stats.apply(v) as f32));
        }
    }
    Ok(TrainItem {
        series: index,
        offset,
        sample,
        positions,
        targets,
    })
}

/// Samples `batch_size` windows: a uniform series among those long enough,
/// a uniform length in `[min_context, max_context]` and a uniform offset.
pub fn make_batch<R: Rng + ?Sized>(
    corpus: &[SeriesRecord],
    model: &ModelConfig,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Batch> {
    if corpus.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    let eligible: Vec<usize> = (0..corpus.len()).filter(|&i| corpus[i].len() >= cfg.min_context).collect();
    if eligible.is_empty() {
        let longest = corpus.iter().map(|r| r.len()).max().unwrap_or(0);
        return Err(Error::Data(format!(
            "no series reaches min_context {}: longest has {longest} points, {} short",
            cfg.min_context,
            cfg.min_context - longest
        )));
    }
    let mut items = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let index = eligible[rng.random_range(0..eligible.len())];
        let series = &corpus[index].values;
        let len = rng.random_range(cfg.min_context..=cfg.max_context.min(series.len()));
        let offset = rng.random_range(0..=series.len() - len);
        items.push(make_item(series, index, offset, len, model)?);
    }
    Ok(Batch {
        items,
        horizon: model.horizon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ModelConfig, TrainConfig) {
        let m = ModelConfig::tiny();
        let mut c = TrainConfig::for_model(&m);
        c.min_context = 12;
        c.max_context = 40;
        c.batch_size = 4;
        (m, c)
    }

    fn ramp(id: &str, n: usize) -> SeriesRecord {
        SeriesRecord::new(id, (0..n).map(|i| (i as f64).sin() * 3.0 + i as f64 * 0.1).collect())
    }

    #[test]
    fn exact_length_series_forces_the_full_window() {
        let (m, c) = setup();
        let corpus = vec![ramp("a", 12)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            let b = make_batch(&corpus, &m, &c, &mut rng).unwrap();
            for it in &b.items {
                assert_eq!((it.offset, it.sample.len()), (0, 12));
                // tokens end at 4, 8, 12; only the first two leave 4 future points
                assert_eq!(it.positions, vec![0, 1]);
            }
        }
    }

    #[test]
    fn targets_follow_each_patch_boundary() {
        let (m, _) = setup();
        let s = ramp("a", 30);
        let it = make_item(&s.values, 0, 3, 10, &m).unwrap();
        // 10 points → 3 tokens, 2 padded; ends at offsets 2, 6, 10
        assert_eq!(it.positions, vec![0, 1, 2]);
        let st = it.sample.stats;
        let expect: Vec<f32> = s.values[3 + 6..3 + 6 + 4].iter().map(|&v| st.apply(v) as f32).collect();
        assert_eq!(it.targets[4..8], expect[..]);
    }

    #[test]
    fn seeded_batches_repeat() {
        let (m, c) = setup();
        let corpus: Vec<_> = (0..3).map(|i| ramp(&i.to_string(), 50 + i)).collect();
        let a = make_batch(&corpus, &m, &c, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = make_batch(&corpus, &m, &c, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for (x, y) in a.items.iter().zip(&b.items) {
            assert_eq!((x.series, x.offset, &x.targets), (y.series, y.offset, &y.targets));
        }
    }

    #[test]
    fn every_series_gets_sampled() {
        // P(some series unseen in 1000 uniform draws) ≤ 10·0.9^1000 ≈ 2e-45
        let (m, mut c) = setup();
        c.batch_size = 1000;
        let corpus: Vec<_> = (0..10).map(|i| ramp(&i.to_string(), 40)).collect();
        let b = make_batch(&corpus, &m, &c, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut seen = [false; 10];
        b.items.iter().for_each(|it| seen[it.series] = true);
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn too_short_corpus_reports_shortfall() {
        let (m, c) = setup();
        let err = make_batch(&[ramp("a", 9)], &m, &c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(err.to_string().contains("3 short"), "{err}");
    }
}
