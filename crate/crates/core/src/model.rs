//! Model configuration, the full set of networks, and one adversarial
//! training step.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttnAxis, Graph};
use crate::error::{config_err, Error, Result};
use crate::fusion::AffineMode;
use crate::matching::ImageEncoder;
use crate::objectives::{
    ca_regularizer_var, damsm_loss_var, discriminator_stage_loss_var, generator_stage_loss_var, word_damsm_loss_var,
    LossBreakdown, StageLogits, WordMatchGammas,
};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::stages::{AttentionSource, DiscriminatorConfig, Generator, GeneratorConfig, StageDiscriminator, STAGES};
use crate::tensor::Tensor;
use crate::text::{TextEncoder, TextEncoderConfig};

/// Architecture hyperparameters shared by every network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Word and sentence feature width; also the matching feature width.
    pub word_dim: usize,
    pub ca_dim: usize,
    pub noise_dim: usize,
    pub max_len: usize,
    /// Generator feature channels.
    pub channels: usize,
    pub disc_channels: usize,
    pub encoder_width: usize,
    pub base_resolution: usize,
    pub residual_blocks: usize,
    pub attn_axis: AttnAxis,
    pub use_ff_block: bool,
    pub use_gsr: bool,
    pub attention_source: AttentionSource,
    pub affine_mode: AffineMode,
    /// Add the word-level matching term to pretraining and the generator loss.
    #[serde(default)]
    pub word_level_damsm: bool,
}

impl ModelConfig {
    /// Small defaults for CPU training on the shapes corpus.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 32,
            word_dim: 64,
            ca_dim: 16,
            noise_dim: 16,
            max_len: 12,
            channels: 8,
            disc_channels: 8,
            encoder_width: 8,
            base_resolution: 16,
            residual_blocks: 2,
            attn_axis: AttnAxis::Words,
            use_ff_block: true,
            use_gsr: true,
            attention_source: AttentionSource::Chained,
            affine_mode: AffineMode::PerElement,
            word_level_damsm: false,
        }
    }

    /// Full-size dimensions: 256-d words, 100-d conditioning, 18 tokens,
    /// 64 -> 128 -> 256 pixels.
    pub fn full_size(vocab_size: usize) -> Self {
        Self {
            embed_dim: 300,
            word_dim: 256,
            ca_dim: 100,
            noise_dim: 100,
            max_len: 18,
            channels: 32,
            disc_channels: 64,
            encoder_width: 64,
            base_resolution: 64,
            ..Self::desk(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(config_err!("vocabulary of {} ids is too small", self.vocab_size));
        }
        if self.max_len == 0 || self.embed_dim == 0 || self.disc_channels == 0 || self.encoder_width == 0 {
            return Err(config_err!("model dimensions must be positive"));
        }
        if self.word_dim % 2 != 0 {
            return Err(config_err!("word_dim {} must be even", self.word_dim));
        }
        self.generator().validate()
    }

    pub fn text(&self) -> TextEncoderConfig {
        TextEncoderConfig { vocab_size: self.vocab_size, embed_dim: self.embed_dim, word_dim: self.word_dim, max_len: self.max_len }
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            sentence_dim: self.word_dim,
            word_dim: self.word_dim,
            ca_dim: self.ca_dim,
            noise_dim: self.noise_dim,
            channels: self.channels,
            base_resolution: self.base_resolution,
            residual_blocks: self.residual_blocks,
            attn_axis: self.attn_axis,
            use_ff_block: self.use_ff_block,
            use_gsr: self.use_gsr,
            attention_source: self.attention_source,
            affine_mode: self.affine_mode,
        }
    }

    pub fn discriminator(&self) -> DiscriminatorConfig {
        DiscriminatorConfig { channels: self.disc_channels, ca_dim: self.ca_dim }
    }

    pub fn resolutions(&self) -> [usize; STAGES] {
        self.generator().resolutions()
    }

    pub fn final_resolution(&self) -> usize {
        self.resolutions()[STAGES - 1]
    }
}

/// Network structure; parameters live in [`NetworkParams`].
#[derive(Clone, Debug)]
pub struct Networks {
    pub config: ModelConfig,
    pub text: TextEncoder,
    pub image: ImageEncoder,
    pub generator: Generator,
    pub discriminators: [StageDiscriminator; STAGES],
}

/// One parameter store per network.
#[derive(Debug)]
pub struct NetworkParams<T> {
    pub text: ParamStore<T>,
    pub image: ParamStore<T>,
    pub generator: [ParamStore<T>; STAGES],
    pub discriminators: [ParamStore<T>; STAGES],
}

/// Names of the per-network parameter files, in [`NetworkParams::stores`] order.
pub const NETWORK_NAMES: [&str; 8] = ["text_encoder", "image_encoder", "g0", "g1", "g2", "d0", "d1", "d2"];

impl<T: Scalar> Clone for NetworkParams<T> {
    fn clone(&self) -> Self {
        Self {
            text: self.text.clone(),
            image: self.image.clone(),
            generator: self.generator.clone(),
            discriminators: self.discriminators.clone(),
        }
    }
}

impl<T: Scalar> NetworkParams<T> {
    pub fn stores(&self) -> [&ParamStore<T>; 8] {
        let [g0, g1, g2] = &self.generator;
        let [d0, d1, d2] = &self.discriminators;
        [&self.text, &self.image, g0, g1, g2, d0, d1, d2]
    }

    pub fn stores_mut(&mut self) -> [&mut ParamStore<T>; 8] {
        let [g0, g1, g2] = &mut self.generator;
        let [d0, d1, d2] = &mut self.discriminators;
        [&mut self.text, &mut self.image, g0, g1, g2, d0, d1, d2]
    }

    pub fn all_finite(&self) -> bool {
        self.stores().iter().all(|s| s.all_finite())
    }
}

impl Networks {
    /// Builds every network, each initialized from its own stream of
    /// `seed`, so toggling the generator flags leaves the other networks'
    /// initial weights unchanged.
    pub fn new<T: Scalar>(config: ModelConfig, seed: u64) -> Result<(Self, NetworkParams<T>)> {
        config.validate()?;
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        let mut text_ps = ParamStore::new();
        let text = TextEncoder::new(&mut text_ps, "text", config.text(), &mut stream(0))?;
        let mut image_ps = ParamStore::new();
        let image =
            ImageEncoder::new(
            &mut image_ps,
            config.final_resolution(),
            config.encoder_width,
            config.word_dim,
            config.word_level_damsm,
            &mut stream(1),
        )?;
        let (generator, gen_ps) = Generator::new(config.generator(), &mut stream(2))?;
        let mut disc_ps = [ParamStore::new(), ParamStore::new(), ParamStore::new()];
        let res = config.resolutions();
        let dcfg = config.discriminator();
        let d0 = StageDiscriminator::new(&mut disc_ps[0], res[0], &dcfg, &mut stream(3))?;
        let d1 = StageDiscriminator::new(&mut disc_ps[1], res[1], &dcfg, &mut stream(4))?;
        let d2 = StageDiscriminator::new(&mut disc_ps[2], res[2], &dcfg, &mut stream(5))?;
        Ok((
            Self { config, text, image, generator, discriminators: [d0, d1, d2] },
            NetworkParams { text: text_ps, image: image_ps, generator: gen_ps, discriminators: disc_ps },
        ))
    }
}

/// Loss weights and optimizer settings for adversarial training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHyper {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Matching-loss temperature.
    pub gamma: f64,
    /// Add real-image/mismatched-caption negatives to the conditional head.
    pub mismatch_negatives: bool,
    pub adam: AdamConfig,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 5.0, gamma: 10.0, mismatch_negatives: true, adam: AdamConfig::default() }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(config_err!("loss weights must be non-negative"));
        }
        if !(self.adam.lr > 0.0) || !(self.gamma > 0.0) {
            return Err(config_err!("learning rate and gamma must be positive"));
        }
        Ok(())
    }
}

/// Adam state for each generator and discriminator stage.
#[derive(Clone, Debug)]
pub struct GanOptimizers<T> {
    pub generator: [Adam<T>; STAGES],
    pub discriminators: [Adam<T>; STAGES],
}

impl<T: Scalar> GanOptimizers<T> {
    pub fn new(config: AdamConfig, params: &NetworkParams<T>) -> Self {
        let g = &params.generator;
        let d = &params.discriminators;
        Self {
            generator: [Adam::new(config, &g[0]), Adam::new(config, &g[1]), Adam::new(config, &g[2])],
            discriminators: [Adam::new(config, &d[0]), Adam::new(config, &d[1]), Adam::new(config, &d[2])],
        }
    }
}

/// Inputs of one training step. Text features come from the frozen encoder.
#[derive(Clone, Debug)]
pub struct GanBatch<T> {
    /// `[B, L, D_w]`
    pub words: Tensor<T>,
    /// `B * L`
    pub mask: Vec<bool>,
    /// `[B, D_w]`
    pub sentence: Tensor<T>,
    /// Real images `[B, 3, R_k, R_k]` per stage.
    pub real: [Tensor<T>; STAGES],
    /// `[B, D_ca]`
    pub ca_noise: Tensor<T>,
    /// `[B, D_z]`
    pub z: Tensor<T>,
}

impl<T: Scalar> GanBatch<T> {
    pub fn len(&self) -> usize {
        self.words.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Moves row `i` to row `i - 1` (cyclically): each sample gets its
/// neighbour's condition.
fn roll_rows<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let b = t.dim(0);
    let w = t.numel() / b;
    let mut data = Vec::with_capacity(t.numel());
    for i in 0..b {
        let j = (i + 1) % b;
        data.extend_from_slice(&t.data()[j * w..(j + 1) * w]);
    }
    Tensor::from_vec(t.shape(), data).expect("shape")
}

/// One discriminator update followed by one generator update.
///
/// The generator runs forward once. The discriminators are first trained on
/// its detached images; the generator loss then re-scores the same images
/// with the updated (frozen) discriminators, adds the CA regularizer and
/// the matching loss of the final image against the sentence feature (and
/// against the words, when word-level matching is enabled).
pub fn gan_step<T: Scalar>(
    nets: &Networks,
    params: &mut NetworkParams<T>,
    opts: &mut GanOptimizers<T>,
    hyper: &TrainHyper,
    batch: &GanBatch<T>,
) -> Result<LossBreakdown> {
    let b = batch.len();
    if b < 2 {
        return Err(config_err!("batch size {b} is too small; matching and mismatch terms need two samples"));
    }

    let mut g = Graph::new();
    g.freeze(&params.image);
    let words = g.constant(batch.words.clone());
    let sentence = g.constant(batch.sentence.clone());
    let noise = g.constant(batch.ca_noise.clone());
    let z = g.constant(batch.z.clone());
    let gen = nets.generator.forward(&mut g, &params.generator, words, &batch.mask, sentence, Some(noise), z);

    // discriminator step on detached fakes
    for (d, ps) in nets.discriminators.iter().zip(params.discriminators.iter_mut()) {
        d.power_iterate(ps);
    }
    let s_ca = g.value(gen.ca.sample).clone();
    let mut dg = Graph::new();
    let cond = dg.constant(s_ca.clone());
    let wrong = dg.constant(roll_rows(&s_ca));
    let mut d_terms = [0.0; STAGES];
    let mut d_total = None;
    for k in 0..STAGES {
        let d = &nets.discriminators[k];
        let ps = &params.discriminators[k];
        let real = dg.constant(batch.real[k].clone());
        let fake = dg.constant(g.value(gen.images[k]).clone());
        let rf = d.features(&mut dg, ps, real);
        let ff = d.features(&mut dg, ps, fake);
        let logits = StageLogits {
            real_uncond: d.uncond_logits(&mut dg, ps, rf),
            fake_uncond: d.uncond_logits(&mut dg, ps, ff),
            real_cond: d.cond_logits(&mut dg, ps, rf, cond),
            fake_cond: d.cond_logits(&mut dg, ps, ff, cond),
            mismatch_cond: hyper.mismatch_negatives.then(|| d.cond_logits(&mut dg, ps, rf, wrong)),
        };
        let loss = discriminator_stage_loss_var(&mut dg, &logits);
        d_terms[k] = dg.value(loss).item().as_f64();
        d_total = Some(match d_total {
            None => loss,
            Some(acc) => dg.add(acc, loss),
        });
    }
    let d_total = d_total.expect("three stages");
    check_finite("discriminator", &d_terms)?;
    let grads = dg.backward(d_total);
    for k in 0..STAGES {
        let pg = dg.param_grads(&grads, &params.discriminators[k]);
        opts.discriminators[k].step(&mut params.discriminators[k], &pg);
    }
    drop(dg);

    // generator step against the updated discriminators
    for ps in &params.discriminators {
        g.freeze(ps);
    }
    let mut g_terms = [0.0; STAGES];
    let mut total = None;
    for k in 0..STAGES {
        let logits = nets.discriminators[k].forward(&mut g, &params.discriminators[k], gen.images[k], gen.ca.sample);
        let loss = generator_stage_loss_var(&mut g, logits.uncond, logits.cond);
        g_terms[k] = g.value(loss).item().as_f64();
        total = Some(match total {
            None => loss,
            Some(acc) => g.add(acc, loss),
        });
    }
    let kl = ca_regularizer_var(&mut g, gen.ca.mu, gen.ca.log_var);
    let (img_f, regions) = nets.image.forward_with_regions(&mut g, &params.image, gen.images[STAGES - 1]);
    let mut damsm = damsm_loss_var(&mut g, img_f, sentence, hyper.gamma);
    if let Some(r) = regions {
        let gammas = WordMatchGammas { score: hyper.gamma, ..Default::default() };
        let word = word_damsm_loss_var(&mut g, r, words, &batch.mask, gammas);
        damsm = g.add(damsm, word);
    }
    let kl_w = g.scale(kl, hyper.lambda1);
    let damsm_w = g.scale(damsm, hyper.lambda2);
    let total = g.add(total.expect("three stages"), kl_w);
    let total = g.add(total, damsm_w);

    let parts = LossBreakdown::new(
        g_terms,
        d_terms,
        g.value(kl).item().as_f64(),
        g.value(damsm).item().as_f64(),
        hyper.lambda1,
        hyper.lambda2,
    );
    if !parts.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss: {parts:?}")));
    }
    let grads = g.backward(total);
    for k in 0..STAGES {
        let pg = g.param_grads(&grads, &params.generator[k]);
        opts.generator[k].step(&mut params.generator[k], &pg);
    }
    Ok(parts)
}

fn check_finite(what: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite {what} loss: {values:?}")))
    }
}

/// Generated images for a batch, one `[B, 3, R_k, R_k]` tensor per stage.
pub fn generate_batch<T: Scalar>(
    nets: &Networks,
    params: &NetworkParams<T>,
    words: &Tensor<T>,
    mask: &[bool],
    sentence: &Tensor<T>,
    ca_noise: Option<&Tensor<T>>,
    z: &Tensor<T>,
) -> [Tensor<T>; STAGES] {
    let mut g = Graph::new();
    for ps in &params.generator {
        g.freeze(ps);
    }
    let w = g.constant(words.clone());
    let s = g.constant(sentence.clone());
    let n = ca_noise.map(|t| g.constant(t.clone()));
    let zv = g.constant(z.clone());
    let out = nets.generator.forward(&mut g, &params.generator, w, mask, s, n, zv);
    out.images.map(|v| g.value(v).clone())
}
