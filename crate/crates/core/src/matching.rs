//! Image encoder for image-text matching, also the frozen feature
//! extractor behind the evaluation metrics, and the joint pretraining step.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{config_err, precondition_err, Error, Result};
use crate::nn::{Conv2d, Linear};
use crate::objectives::{damsm_loss_var, word_damsm_loss_var, WordMatchGammas};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::{Caption, TextEncoder};

const SLOPE: f64 = 0.2;
const EXTRACT_CHUNK: usize = 64;

/// Strided 4x4 conv blocks down to 4x4, spatial mean, linear projection.
/// With word-level matching enabled, a 1x1 projection also maps the 4x4
/// map to `F`-wide region features.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    blocks: Vec<Conv2d>,
    proj: Linear,
    regions: Option<Conv2d>,
    pub resolution: usize,
    pub feature_dim: usize,
}

impl ImageEncoder {
    /// Channels go `3 -> width -> 2 width -> ...`, one block per halving.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        resolution: usize,
        width: usize,
        feature_dim: usize,
        word_level: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if resolution < 8 || !resolution.is_power_of_two() {
            return Err(config_err!("image encoder resolution {resolution} must be a power of two >= 8"));
        }
        let downs = (resolution / 4).trailing_zeros() as usize;
        let mut blocks = Vec::with_capacity(downs);
        let mut cin = 3;
        for k in 0..downs {
            let cout = width << k;
            blocks.push(Conv2d::new(ps, &format!("img.block{k}"), cin, cout, 4, 2, 1, true, rng));
            cin = cout;
        }
        let proj = Linear::new(ps, "img.proj", cin, feature_dim, true, rng);
        let regions = word_level.then(|| Conv2d::new(ps, "img.regions", cin, feature_dim, 1, 1, 0, false, rng));
        Ok(Self { blocks, proj, regions, resolution, feature_dim })
    }

    pub fn word_level(&self) -> bool {
        self.regions.is_some()
    }

    /// `[B, 3, R, R]` to `[B, F]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, images: Var) -> Var {
        self.forward_with_regions(g, ps, images).0
    }

    /// Global features `[B, F]` and, with word-level matching enabled,
    /// region features `[B, F, 16]`.
    pub fn forward_with_regions<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, images: Var) -> (Var, Option<Var>) {
        let mut x = images;
        for conv in &self.blocks {
            x = conv.forward(g, ps, x);
            x = g.leaky_relu(x, SLOPE);
        }
        let pooled = g.mean_spatial(x);
        let global = self.proj.forward(g, ps, pooled);
        let regions = self.regions.as_ref().map(|conv| {
            let r = conv.forward(g, ps, x);
            let s = g.shape(r).to_vec();
            g.reshape(r, &[s[0], s[1], s[2] * s[3]])
        });
        (global, regions)
    }

    /// Frozen features of `[3, R, R]` images, `[count, F]`.
    pub fn extract_features<T: Scalar>(&self, ps: &ParamStore<T>, images: &[Tensor<T>]) -> Result<Tensor<T>> {
        let r = self.resolution;
        if let Some(bad) = images.iter().find(|t| t.shape() != [3, r, r]) {
            return Err(config_err!("extractor expects [3, {r}, {r}] images, got {:?}", bad.shape()));
        }
        let mut rows = Vec::with_capacity(images.len() * self.feature_dim);
        for chunk in images.chunks(EXTRACT_CHUNK) {
            let batch = Tensor::stack(chunk)?;
            let mut g = Graph::new();
            g.freeze(ps);
            let x = g.constant(batch);
            let f = self.forward(&mut g, ps, x);
            rows.extend_from_slice(g.value(f).data());
        }
        Tensor::from_vec(&[images.len(), self.feature_dim], rows)
    }
}

/// Images `[B, 3, R, R]` with one caption each.
#[derive(Clone, Debug)]
pub struct MatchingBatch<T> {
    pub images: Tensor<T>,
    pub captions: Vec<Caption>,
}

/// One joint update of the text and image encoders on the symmetric
/// matching loss, plus the word-level term when the image encoder has a
/// region head; returns the loss before the update.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_step<T: Scalar>(
    text: &TextEncoder,
    text_params: &mut ParamStore<T>,
    text_opt: &mut Adam<T>,
    image: &ImageEncoder,
    image_params: &mut ParamStore<T>,
    image_opt: &mut Adam<T>,
    batch: &MatchingBatch<T>,
    gamma: f64,
) -> Result<f64> {
    if batch.captions.len() < 2 || batch.images.dim(0) != batch.captions.len() {
        return Err(precondition_err!("matching batch needs at least two aligned pairs"));
    }
    if text.config.word_dim != image.feature_dim {
        return Err(config_err!("text width {} != image feature width {}", text.config.word_dim, image.feature_dim));
    }
    let mut g = Graph::new();
    let imgs = g.constant(batch.images.clone());
    let (img_f, regions) = image.forward_with_regions(&mut g, image_params, imgs);
    let txt = text.forward(&mut g, text_params, &batch.captions);
    let mut loss = damsm_loss_var(&mut g, img_f, txt.sentence, gamma);
    if let Some(r) = regions {
        let mask: Vec<bool> = batch.captions.iter().flat_map(|c| c.mask.iter().copied()).collect();
        let word = word_damsm_loss_var(&mut g, r, txt.words, &mask, WordMatchGammas { score: gamma, ..Default::default() });
        loss = g.add(loss, word);
    }
    let value = g.value(loss).item().as_f64();
    if !value.is_finite() {
        return Err(Error::Numerical(format!("matching loss is {value}")));
    }
    let grads = g.backward(loss);
    let tg = g.param_grads(&grads, text_params);
    let ig = g.param_grads(&grads, image_params);
    text_opt.step(text_params, &tg);
    image_opt.step(image_params, &ig);
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn features_are_deterministic_and_sensitive() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamStore::<f32>::new();
        let enc = ImageEncoder::new(&mut ps, 16, 4, 8, false, &mut rng).unwrap();
        let a = Tensor::randn(&[3, 16, 16], &mut rng);
        let mut b = a.clone();
        b.data_mut()[100] += 0.5;
        let f = enc.extract_features(&ps, &[a.clone(), a.clone(), b]).unwrap();
        assert_eq!(f.shape(), &[3, 8]);
        assert_eq!(f.data()[..8], f.data()[8..16]);
        assert_ne!(f.data()[..8], f.data()[16..]);
        assert!(matches!(enc.extract_features(&ps, &[Tensor::zeros(&[3, 8, 8])]), Err(Error::Config(_))));
    }
}
