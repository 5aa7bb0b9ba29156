//! Word- and sentence-level cross-modal attention over visual sub-regions.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{AttnAxis, Graph, Var};
use crate::error::{config_err, precondition_err, Error, Result};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::{AugmentedSentence, Caption, WordFeatures};

/// `D_m` channels over an `H x W` grid of sub-regions.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatureMap<T> {
    values: Tensor<T>,
}

impl<T: Scalar> VisualFeatureMap<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.ndim() != 3 {
            return Err(config_err!("feature map must be [channels, height, width], got {:?}", values.shape()));
        }
        let (h, w) = (values.dim(1), values.dim(2));
        if !h.is_power_of_two() || !w.is_power_of_two() {
            return Err(config_err!("feature map spatial size {h}x{w} is not a power of two"));
        }
        if !values.is_finite() {
            return Err(Error::Numerical("feature map has non-finite entries".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn into_values(self) -> Tensor<T> {
        self.values
    }

    pub fn channels(&self) -> usize {
        self.values.dim(0)
    }

    pub fn height(&self) -> usize {
        self.values.dim(1)
    }

    pub fn width(&self) -> usize {
        self.values.dim(2)
    }

    pub fn regions(&self) -> usize {
        self.height() * self.width()
    }

    pub(crate) fn batched(&self) -> Tensor<T> {
        let s = self.values.shape();
        self.values.clone().reshape(&[1, s[0], s[1], s[2]]).expect("shape")
    }
}

/// Attention weights `[L, N]` with the axis they were normalized over.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T> {
    pub values: Tensor<T>,
    pub axis: AttnAxis,
    pub height: usize,
    pub width: usize,
}

impl<T: Scalar> AttentionWeights<T> {
    pub fn words(&self) -> usize {
        self.values.dim(0)
    }

    pub fn row(&self, word: usize) -> &[T] {
        let n = self.values.dim(1);
        &self.values.data()[word * n..(word + 1) * n]
    }
}

/// Context feature congruent to the visual map it was computed against.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextMap<T> {
    pub values: Tensor<T>,
}

/// Projects word features into the visual channel space (`U_w`) and
/// attends between words and sub-regions.
#[derive(Clone, Debug)]
pub struct WordAttention {
    proj: Linear,
}

impl WordAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        word_dim: usize,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        Self { proj: Linear::new(ps, &format!("{name}.proj"), word_dim, channels, false, rng) }
    }

    pub fn projection(&self) -> &Linear {
        &self.proj
    }

    /// `words: [B, L, D_w]`, `mask: B*L`, `h: [B, D_m, H, W]`.
    /// Returns the context `[B, D_m, H, W]` and weights `[B, L, H*W]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        words: Var,
        mask: &[bool],
        h: Var,
        axis: AttnAxis,
    ) -> (Var, Var) {
        let (b, l, dw) = {
            let s = g.shape(words);
            (s[0], s[1], s[2])
        };
        let hs = g.shape(h).to_vec();
        let (dm, n) = (hs[1], hs[2] * hs[3]);
        let flat = g.reshape(words, &[b * l, dw]);
        let e = self.proj.forward(g, ps, flat);
        let e = g.reshape(e, &[b, l, dm]);
        let regions = g.reshape(h, &[b, dm, n]);
        let scores = g.bmm(e, regions, false, false);
        let weights = g.attn_softmax(scores, mask, axis);
        let ctx = g.bmm(e, weights, true, false);
        let ctx = g.reshape(ctx, &hs);
        (ctx, weights)
    }

    pub fn word_context<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        words: &WordFeatures<T>,
        h: &VisualFeatureMap<T>,
        axis: AttnAxis,
    ) -> Result<(ContextMap<T>, AttentionWeights<T>)> {
        if !words.mask.iter().any(|&m| m) {
            return Err(precondition_err!("every word is masked"));
        }
        if words.dim() != self.proj.in_features || h.channels() != self.proj.out_features {
            return Err(config_err!(
                "word attention expects {} -> {} channels, got {} and {}",
                self.proj.in_features,
                self.proj.out_features,
                words.dim(),
                h.channels()
            ));
        }
        let mut g = Graph::new();
        let (l, dw) = (words.max_len(), words.dim());
        let w = g.constant(words.values.clone().reshape(&[1, l, dw])?);
        let hv = g.constant(h.batched());
        let (ctx, weights) = self.forward(&mut g, ps, w, &words.mask, hv, axis);
        Ok((
            ContextMap { values: g.value(ctx).clone().reshape(h.values().shape())? },
            AttentionWeights {
                values: g.value(weights).clone().reshape(&[l, h.regions()])?,
                axis,
                height: h.height(),
                width: h.width(),
            },
        ))
    }
}

/// Sentence-level attention: one projected sentence vector (`U_s`)
/// distributed over sub-regions.
#[derive(Clone, Debug)]
pub struct SentenceAttention {
    proj: Linear,
}

impl SentenceAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        sentence_dim: usize,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        Self { proj: Linear::new(ps, &format!("{name}.proj"), sentence_dim, channels, false, rng) }
    }

    pub fn projection(&self) -> &Linear {
        &self.proj
    }

    /// `sentence: [B, D_ca]`, `h: [B, D_m, H, W]`; weights are `[B, 1, H*W]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, sentence: Var, h: Var) -> (Var, Var) {
        let b = g.shape(sentence)[0];
        let hs = g.shape(h).to_vec();
        let (dm, n) = (hs[1], hs[2] * hs[3]);
        let e = self.proj.forward(g, ps, sentence);
        let e = g.reshape(e, &[b, 1, dm]);
        let regions = g.reshape(h, &[b, dm, n]);
        let scores = g.bmm(e, regions, false, false);
        let weights = g.attn_softmax(scores, &vec![true; b], AttnAxis::Regions);
        let ctx = g.bmm(e, weights, true, false);
        let ctx = g.reshape(ctx, &hs);
        (ctx, weights)
    }

    pub fn sentence_context<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        sentence: &AugmentedSentence<T>,
        h: &VisualFeatureMap<T>,
    ) -> Result<(ContextMap<T>, AttentionWeights<T>)> {
        if !sentence.0.is_finite() {
            return Err(Error::Numerical("augmented sentence has non-finite entries".into()));
        }
        if sentence.0.numel() != self.proj.in_features || h.channels() != self.proj.out_features {
            return Err(config_err!("sentence attention dimension mismatch"));
        }
        let mut g = Graph::new();
        let s = g.constant(sentence.0.clone().reshape(&[1, self.proj.in_features])?);
        let hv = g.constant(h.batched());
        let (ctx, weights) = self.forward(&mut g, ps, s, hv);
        Ok((
            ContextMap { values: g.value(ctx).clone().reshape(h.values().shape())? },
            AttentionWeights {
                values: g.value(weights).clone().reshape(&[1, h.regions()])?,
                axis: AttnAxis::Regions,
                height: h.height(),
                width: h.width(),
            },
        ))
    }
}

/// 8-bit grayscale raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Min-max normalized, nearest-neighbour upscaled map per real word.
/// A constant row maps to all zeros.
pub fn attention_heatmaps<T: Scalar>(weights: &AttentionWeights<T>, caption: &Caption, upscale_to: usize) -> Vec<GrayImage> {
    let (h, w) = (weights.height, weights.width);
    let size = upscale_to.max(h.max(w));
    (0..caption.length.min(weights.words()))
        .map(|word| {
            let row: Vec<f64> = weights.row(word).iter().map(|v| v.as_f64()).collect();
            let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let range = hi - lo;
            let level = |v: f64| -> u8 {
                if range > 0.0 {
                    num_traits::Float::round((v - lo) / range * 255.0) as u8
                } else {
                    0
                }
            };
            let mut pixels = Vec::with_capacity(size * size);
            for y in 0..size {
                let sy = y * h / size;
                for x in 0..size {
                    pixels.push(level(row[sy * w + x * w / size]));
                }
            }
            GrayImage { width: size, height: size, pixels }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn singleton_word_takes_all_weight() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::<f64>::new();
        let att = WordAttention::new(&mut ps, "a", 3, 2, &mut rng);
        let mut values = Tensor::zeros(&[3, 3]);
        values.data_mut()[..3].copy_from_slice(&[0.3, -1.0, 0.5]);
        let words = WordFeatures { values, mask: vec![true, false, false] };
        let h = VisualFeatureMap::new(Tensor::randn(&[2, 2, 2], &mut rng)).unwrap();
        let (ctx, wts) = att.word_context(&ps, &words, &h, AttnAxis::Words).unwrap();
        assert!(wts.row(0).iter().all(|&v| v == 1.0));
        assert!(wts.row(1).iter().chain(wts.row(2)).all(|&v| v == 0.0));
        let u = ps.get(att.proj.weight).data().to_vec();
        let e: Vec<f64> = (0..2).map(|c| (0..3).map(|k| u[c * 3 + k] * words.word(0)[k]).sum()).collect();
        for c in 0..2 {
            for j in 0..4 {
                assert!((ctx.values.data()[c * 4 + j] - e[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_masked_is_rejected() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::<f64>::new();
        let att = WordAttention::new(&mut ps, "a", 3, 2, &mut rng);
        let words = WordFeatures { values: Tensor::zeros(&[2, 3]), mask: vec![false, false] };
        let h = VisualFeatureMap::new(Tensor::zeros(&[2, 2, 2])).unwrap();
        for axis in [AttnAxis::Words, AttnAxis::Regions] {
            assert!(matches!(att.word_context(&ps, &words, &h, axis), Err(Error::Precondition(_))));
        }
    }

    #[test]
    fn feature_map_rejects_non_power_of_two() {
        assert!(VisualFeatureMap::new(Tensor::<f32>::zeros(&[2, 3, 4])).is_err());
        assert!(VisualFeatureMap::new(Tensor::<f32>::full(&[1, 2, 2], f32::NAN)).is_err());
    }

    #[test]
    fn heatmaps_count_and_degenerate_rows() {
        let weights = AttentionWeights {
            values: Tensor::<f32>::full(&[4, 4], 0.25),
            axis: AttnAxis::Regions,
            height: 2,
            width: 2,
        };
        let caption = Caption { ids: vec![2, 3, 4, 0], mask: vec![true, true, true, false], length: 3 };
        let maps = attention_heatmaps(&weights, &caption, 8);
        assert_eq!(maps.len(), 3);
        assert!(maps.iter().all(|m| m.width == 8 && m.pixels.iter().all(|&p| p == 0)));
    }

    #[test]
    fn heatmap_nearest_upscale() {
        let weights = AttentionWeights {
            values: Tensor::<f64>::from_f64(&[1, 4], &[0.0, 1.0, 0.5, 0.0]).unwrap(),
            axis: AttnAxis::Regions,
            height: 2,
            width: 2,
        };
        let caption = Caption { ids: vec![2], mask: vec![true], length: 1 };
        let m = &attention_heatmaps(&weights, &caption, 4)[0];
        assert_eq!(&m.pixels[..4], &[0, 0, 255, 255]);
        assert_eq!(&m.pixels[8..12], &[128, 128, 0, 0]);
    }
}
