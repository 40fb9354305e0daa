//! Series → normalized, left-padded, masked patch tokens.
//!
//! A context window is standardized with its own mean and population standard
//! deviation, split into `N = ⌈T/P⌉` patches of length `P` (zero padding at
//! the start so the most recent point closes the last patch), and each patch is
//! embedded together with its observation mask by a shared two-layer MLP.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::layers::{join, Linear, Module};
use crate::tensor::Tensor;

/// Lower bound on the standard deviation used for normalization.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Standardizes `values`; the statistics are kept for the inverse map.
pub fn normalize(values: &[f64]) -> Result<(Vec<f64>, NormStats)> {
    if values.is_empty() {
        return Err(Error::Data("cannot normalize an empty series".into()));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite value at index {i}")));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let stats = NormStats {
        mean,
        std: var.sqrt().max(NORM_EPS),
    };
    Ok((values.iter().map(|&v| stats.apply(v)).collect(), stats))
}

pub fn denormalize(values: &[f64], stats: &NormStats) -> Vec<f64> {
    values.iter().map(|&z| stats.invert(z)).collect()
}

/// Row-major `N×P` patch values and mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Patches {
    pub patch_len: usize,
    pub n_tokens: usize,
    pub values: Vec<f32>,
    pub mask: Vec<f32>,
}

impl Patches {
    /// Number of padded slots, all inside the first patch.
    pub fn padding(&self) -> usize {
        self.mask.iter().take_while(|&&m| m == 0.0).count()
    }

    pub fn observed(&self) -> usize {
        self.n_tokens * self.patch_len - self.padding()
    }

    /// Patch `i` as `(values, mask)`.
    pub fn token(&self, i: usize) -> (&[f32], &[f32]) {
        let p = self.patch_len;
        (&self.values[i * p..(i + 1) * p], &self.mask[i * p..(i + 1) * p])
    }

    /// Patches `start..start+len` as a new block.
    pub fn slice(&self, start: usize, len: usize) -> Patches {
        let p = self.patch_len;
        Patches {
            patch_len: p,
            n_tokens: len,
            values: self.values[start * p..(start + len) * p].to_vec(),
            mask: self.mask[start * p..(start + len) * p].to_vec(),
        }
    }

    /// Exclusive end of patch `i` in coordinates of the unpadded series.
    pub fn token_end(&self, i: usize) -> usize {
        (i + 1) * self.patch_len - self.padding()
    }
}

/// Splits `values` into `⌈T/P⌉` patches, zero-padding at the beginning.
pub fn patchify(values: &[f64], patch_len: usize) -> Result<Patches> {
    if patch_len == 0 {
        return Err(config("patch length must be positive"));
    }
    if values.is_empty() {
        return Err(contract("cannot patchify an empty series"));
    }
    let n = values.len().div_ceil(patch_len);
    let pad = n * patch_len - values.len();
    let mut v = vec![0f32; pad];
    let mut m = vec![0f32; pad];
    v.extend(values.iter().map(|&x| x as f32));
    m.extend(std::iter::repeat_n(1f32, values.len()));
    Ok(Patches {
        patch_len,
        n_tokens: n,
        values: v,
        mask: m,
    })
}

/// One context window ready for the backbone.
#[derive(Clone, Debug)]
pub struct SeriesSample {
    pub values: Vec<f64>,
    pub stats: NormStats,
    pub normalized: Vec<f64>,
    pub patches: Patches,
}

impl SeriesSample {
    pub fn new(values: &[f64], patch_len: usize) -> Result<Self> {
        let (normalized, stats) = normalize(values)?;
        let patches = patchify(&normalized, patch_len)?;
        Ok(SeriesSample {
            values: values.to_vec(),
            stats,
            normalized,
            patches,
        })
    }

    /// Uses fixed statistics instead of fitting them on `values`.
    pub fn with_stats(values: &[f64], stats: NormStats, patch_len: usize) -> Result<Self> {
        let normalized: Vec<f64> = values.iter().map(|&v| stats.apply(v)).collect();
        let patches = patchify(&normalized, patch_len)?;
        Ok(SeriesSample {
            values: values.to_vec(),
            stats,
            normalized,
            patches,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_tokens(&self) -> usize {
        self.patches.n_tokens
    }
}

/// Shared `2P → D → D` MLP applied to every `[x_i ‖ m_i]`.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub hidden: Linear,
    pub output: Linear,
}

impl PatchEmbed {
    pub fn new<R: Rng + ?Sized>(patch_len: usize, d_model: usize, std: f32, rng: &mut R) -> Self {
        PatchEmbed {
            hidden: Linear::new(2 * patch_len, d_model, true, std, rng),
            output: Linear::new(d_model, d_model, true, std, rng),
        }
    }

    pub fn patch_len(&self) -> usize {
        self.hidden.d_in() / 2
    }

    /// `[N, 2P]` input rows.
    pub fn input_rows(patches: &Patches) -> Result<Tensor> {
        let p = patches.patch_len;
        let mut rows = Vec::with_capacity(patches.n_tokens * 2 * p);
        for i in 0..patches.n_tokens {
            let (x, m) = patches.token(i);
            rows.extend_from_slice(x);
            rows.extend_from_slice(m);
        }
        Tensor::from_vec(rows, &[patches.n_tokens, 2 * p])
    }

    /// Embeds every patch: `[N, D]`.
    pub fn forward(&self, patches: &Patches) -> Result<Tensor> {
        if patches.patch_len != self.patch_len() {
            return Err(config(format!(
                "patch length {} does not match the embedding's {}",
                patches.patch_len,
                self.patch_len()
            )));
        }
        let x = Self::input_rows(patches)?;
        self.output.forward(&self.hidden.forward(&x)?.gelu())
    }
}

impl Module for PatchEmbed {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gelu_scalar;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_series_normalizes_to_zero() {
        let (z, s) = normalize(&[5.0, 5.0, 5.0]).unwrap();
        assert_eq!(z, vec![0.0, 0.0, 0.0]);
        assert_eq!(s.mean, 5.0);
        assert_eq!(s.std, NORM_EPS);
    }

    #[test]
    fn one_two_three() {
        let (z, s) = normalize(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 0.816_496_580_927_726).abs() < 1e-12);
        let expect = [-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589];
        for (a, b) in z.iter().zip(expect) {
            assert!((a - b).abs() < 1e-9);
        }
        let back = denormalize(&z, &s);
        for (a, b) in back.iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn denormalize_examples() {
        let s = NormStats { mean: 3.0, std: 2.0 };
        assert_eq!(denormalize(&[0.0, 0.0], &s), vec![3.0, 3.0]);
        let id = NormStats { mean: 0.0, std: 1.0 };
        assert_eq!(denormalize(&[1.0], &id), vec![1.0]);
    }

    #[test]
    fn non_finite_input_reports_index() {
        let err = normalize(&[1.0, f64::NAN, 2.0]).unwrap_err();
        assert!(err.to_string().contains("index 1"), "{err}");
    }

    #[test]
    fn random_roundtrips() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let len = rng.random_range(1..200);
            let scale = 10f64.powf(rng.random_range(-3.0..3.0));
            let shift = rng.random_range(-1e3..1e3);
            let x: Vec<f64> = (0..len).map(|_| shift + scale * rng.random_range(-1.0..1.0)).collect();
            let (z, s) = normalize(&x).unwrap();
            let back = denormalize(&z, &s);
            let denom = x.iter().fold(0f64, |a, v| a.max(v.abs())).max(1e-12);
            let err = x.iter().zip(&back).fold(0f64, |a, (p, q)| a.max((p - q).abs() / denom));
            assert!(err < 1e-5);
        }
    }

    #[test]
    fn patch_counts() {
        let p = patchify(&vec![1.0; 2880], 16).unwrap();
        assert_eq!(p.n_tokens, 180);
        assert_eq!(p.padding(), 0);

        let p = patchify(&[1.0; 17], 16).unwrap();
        assert_eq!(p.n_tokens, 2);
        assert_eq!(p.padding(), 15);
        assert!(p.values[..15].iter().all(|&v| v == 0.0));

        let p = patchify(&[1.0; 16], 16).unwrap();
        assert_eq!(p.n_tokens, 1);
        assert!(p.mask.iter().all(|&m| m == 1.0));
    }

    #[test]
    fn zero_patch_length_is_config_error() {
        assert!(matches!(patchify(&[1.0], 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_mlp_embeds_to_zero() {
        let embed = PatchEmbed {
            hidden: Linear::zeros(8, 6, false),
            output: Linear::zeros(6, 6, false),
        };
        let patches = Patches {
            patch_len: 4,
            n_tokens: 1,
            values: vec![0.0; 4],
            mask: vec![0.0; 4],
        };
        let h = embed.forward(&patches).unwrap();
        assert_eq!(h.shape(), &[1, 6]);
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_patch_length_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let embed = PatchEmbed::new(4, 6, 0.1, &mut rng);
        let patches = patchify(&[1.0; 10], 5).unwrap();
        assert!(matches!(embed.forward(&patches), Err(Error::Config(_))));
    }

    #[test]
    fn identical_patches_embed_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let embed = PatchEmbed::new(4, 6, 0.3, &mut rng);
        let patches = patchify(&[1.0, -2.0, 0.5, 3.0, 1.0, -2.0, 0.5, 3.0], 4).unwrap();
        let h = embed.forward(&patches).unwrap();
        assert_eq!(h.data()[..6], h.data()[6..]);
    }

    #[test]
    fn embedding_matches_f64_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let embed = PatchEmbed::new(4, 5, 0.5, &mut rng);
        let x: Vec<f64> = (0..7).map(|_| rng.random_range(-2.0..2.0)).collect();
        let patches = patchify(&x, 4).unwrap();
        let h = embed.forward(&patches).unwrap();

        let w1 = embed.hidden.weight.data();
        let b1 = embed.hidden.bias.as_ref().unwrap().data();
        let w2 = embed.output.weight.data();
        let b2 = embed.output.bias.as_ref().unwrap().data();
        for i in 0..patches.n_tokens {
            let (v, m) = patches.token(i);
            let input: Vec<f64> = v.iter().chain(m).map(|&a| a as f64).collect();
            let hid: Vec<f64> = (0..5)
                .map(|j| gelu_scalar(b1[j] as f64 + (0..8).map(|k| input[k] * w1[k * 5 + j] as f64).sum::<f64>()))
                .collect();
            for j in 0..5 {
                let o = b2[j] as f64 + (0..5).map(|k| hid[k] * w2[k * 5 + j] as f64).sum::<f64>();
                assert!((o - h.data()[i * 5 + j] as f64).abs() < 1e-5);
            }
        }
    }

    proptest! {
        #[test]
        fn patch_layout_invariants(len in 1usize..80, p in 1usize..20) {
            let x: Vec<f64> = (0..len).map(|i| i as f64 * 0.5 - 3.0).collect();
            let patches = patchify(&x, p).unwrap();
            prop_assert_eq!(patches.n_tokens, len.div_ceil(p));
            prop_assert_eq!(patches.mask.iter().filter(|&&m| m == 1.0).count(), len);
            prop_assert!(patches.mask.iter().all(|&m| m == 0.0 || m == 1.0));
            let pad = patches.padding();
            prop_assert!(pad < p);
            prop_assert!(patches.values[..pad].iter().all(|&v| v == 0.0));
            let tail: Vec<f32> = patches.values[pad..].to_vec();
            let expect: Vec<f32> = x.iter().map(|&v| v as f32).collect();
            prop_assert_eq!(tail, expect);
        }

        #[test]
        fn embedding_is_position_equivariant(seed in 0u64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let embed = PatchEmbed::new(3, 4, 0.4, &mut rng);
            let x: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let patches = patchify(&x, 3).unwrap();
            let h = embed.forward(&patches).unwrap();
            // reverse row order
            let rev = Patches {
                patch_len: 3,
                n_tokens: 3,
                values: (0..3).rev().flat_map(|i| patches.token(i).0.to_vec()).collect(),
                mask: (0..3).rev().flat_map(|i| patches.token(i).1.to_vec()).collect(),
            };
            let hr = embed.forward(&rev).unwrap();
            for i in 0..3 {
                prop_assert_eq!(&h.data()[i * 4..(i + 1) * 4], &hr.data()[(2 - i) * 4..(3 - i) * 4]);
            }
        }
    }
}
