use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rotated keys and values of one layer, each `[H, n_cached, d]`.
#[derive(Clone, Debug, Default)]
pub struct LayerCache {
    keys: Option<Tensor>,
    values: Option<Tensor>,
    capacity: usize,
}

impl LayerCache {
    pub fn len(&self) -> usize {
        self.keys.as_ref().map_or(0, |k| k.shape()[1])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn keys(&self) -> Option<&Tensor> {
        self.keys.as_ref()
    }

    pub fn values(&self) -> Option<&Tensor> {
        self.values.as_ref()
    }

    /// Evicts the oldest entries so the new ones fit, appends them, and
    /// returns the full key and value blocks to attend over.
    pub(crate) fn append(&mut self, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
        let n_new = k.shape()[1];
        if n_new > self.capacity {
            return Err(Error::State(format!(
                "{n_new} new tokens exceed the cache capacity of {}",
                self.capacity
            )));
        }
        let keep = self.len().min(self.capacity - n_new);
        let (k, v) = match (&self.keys, &self.values) {
            (Some(ck), Some(cv)) if keep > 0 => {
                let drop = ck.shape()[1] - keep;
                let ck = ck.narrow(1, drop, keep)?;
                let cv = cv.narrow(1, drop, keep)?;
                (Tensor::concat(&[ck, k.clone()], 1)?, Tensor::concat(&[cv, v.clone()], 1)?)
            }
            _ => (k.clone(), v.clone()),
        };
        self.keys = Some(k.detach());
        self.values = Some(v.detach());
        Ok((k, v))
    }
}

/// Per-layer key/value store for incremental decoding.
///
/// Keys are stored after rotation at their absolute positions. Once
/// `capacity` tokens are cached the oldest are evicted while positions keep
/// counting up, so every token keeps attending to a sliding window.
#[derive(Clone, Debug)]
pub struct KVCache {
    layers: Vec<LayerCache>,
    next_position: usize,
}

impl KVCache {
    pub fn new(layers: usize, capacity: usize) -> Self {
        let layer = LayerCache {
            capacity,
            ..Default::default()
        };
        KVCache {
            layers: vec![layer; layers],
            next_position: 0,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Tokens currently held (identical across layers).
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, LayerCache::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.layers.first().map_or(0, |l| l.capacity)
    }

    /// Absolute position the next appended token will take.
    pub fn next_position(&self) -> usize {
        self.next_position
    }

    pub fn layer(&self, i: usize) -> &LayerCache {
        &self.layers[i]
    }

    pub(crate) fn layer_mut(&mut self, i: usize) -> &mut LayerCache {
        &mut self.layers[i]
    }

    pub(crate) fn advance(&mut self, n: usize) {
        self.next_position += n;
    }

    /// Bytes of cached keys and values.
    pub fn bytes(&self) -> usize {
        self.layers
            .iter()
            .map(|l| 2 * l.keys.as_ref().map_or(0, |k| k.numel()) * std::mem::size_of::<f32>())
            .sum()
    }

    pub fn clear(&mut self) {
        for l in &mut self.layers {
            l.keys = None;
            l.values = None;
        }
        self.next_position = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(n: usize, fill: f32) -> Tensor {
        Tensor::full(&[2, n, 3], fill)
    }

    #[test]
    fn append_grows_by_one() {
        let mut c = KVCache::new(2, 4);
        for step in 1..=3 {
            for l in 0..2 {
                c.layer_mut(l).append(&block(1, step as f32), &block(1, 0.0)).unwrap();
            }
            c.advance(1);
            assert_eq!(c.len(), step);
            assert_eq!(c.next_position(), step);
        }
        assert_eq!(c.bytes(), 2 * 2 * (2 * 3 * 3) * 4);
    }

    #[test]
    fn overflow_evicts_oldest() {
        let mut c = LayerCache {
            capacity: 3,
            ..Default::default()
        };
        for step in 0..5 {
            let (k, _) = c.append(&block(1, step as f32), &block(1, 0.0)).unwrap();
            assert_eq!(k.shape()[1], (step + 1).min(3));
        }
        let k = c.keys().unwrap();
        assert_eq!(k.shape(), &[2, 3, 3]);
        assert_eq!(k.data()[0], 2.0);
        assert_eq!(k.data()[8], 4.0);
    }

    #[test]
    fn oversize_append_is_a_state_error() {
        let mut c = LayerCache {
            capacity: 2,
            ..Default::default()
        };
        assert!(matches!(c.append(&block(3, 0.0), &block(3, 0.0)), Err(Error::State(_))));
    }
}
