//! Staged generator (initial generation plus two refinement stages) and
//! the per-stage spectrally normalized discriminators.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionWeights, SentenceAttention, VisualFeatureMap, WordAttention};
use crate::autograd::{AttnAxis, Graph, Var};
use crate::error::{config_err, precondition_err, Error, Result};
use crate::fusion::{AffineMode, FfBlock};
use crate::nn::{Conv2d, Linear};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::{AugmentedSentence, CaNoise, CaVars, Caption, CondAugment, TextEncoder, WordFeatures};

pub const STAGES: usize = 3;
const SLOPE: f64 = 0.2;

/// Which feature map the refinement stages attend over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionSource {
    /// Stage `i` attends over the features of stage `i - 1`.
    #[default]
    Chained,
    /// Every stage attends over the initial features, upsampled as needed.
    Initial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub sentence_dim: usize,
    pub word_dim: usize,
    pub ca_dim: usize,
    pub noise_dim: usize,
    pub channels: usize,
    pub base_resolution: usize,
    pub residual_blocks: usize,
    pub attn_axis: AttnAxis,
    pub use_ff_block: bool,
    pub use_gsr: bool,
    pub attention_source: AttentionSource,
    pub affine_mode: AffineMode,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_resolution < 8 || !self.base_resolution.is_power_of_two() {
            return Err(config_err!("base resolution {} must be a power of two >= 8", self.base_resolution));
        }
        if self.channels == 0 || self.ca_dim == 0 || self.noise_dim == 0 || self.word_dim == 0 {
            return Err(config_err!("generator dimensions must be positive"));
        }
        Ok(())
    }

    pub fn resolutions(&self) -> [usize; STAGES] {
        [self.base_resolution, self.base_resolution * 2, self.base_resolution * 4]
    }
}

/// Nearest x2 upsampling, 3x3 conv to twice the output width, gated linear unit.
#[derive(Clone, Debug)]
pub struct UpBlock {
    conv: Conv2d,
}

impl UpBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self { conv: Conv2d::same3(ps, name, cin, 2 * cout, rng) }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let x = g.upsample2x(x);
        let x = self.conv.forward(g, ps, x);
        g.glu(x)
    }
}

#[derive(Clone, Debug)]
pub struct ResBlock {
    first: Conv2d,
    second: Conv2d,
}

impl ResBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut R) -> Self {
        Self {
            first: Conv2d::same3(ps, &format!("{name}.0"), channels, 2 * channels, rng),
            second: Conv2d::same3(ps, &format!("{name}.1"), channels, channels, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let y = self.first.forward(g, ps, x);
        let y = g.glu(y);
        let y = self.second.forward(g, ps, y);
        g.add(x, y)
    }
}

/// 3x3 conv to RGB followed by tanh.
#[derive(Clone, Debug)]
pub struct ImageHead {
    conv: Conv2d,
}

impl ImageHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut R) -> Self {
        Self { conv: Conv2d::same3(ps, name, channels, 3, rng) }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let x = self.conv.forward(g, ps, x);
        g.tanh(x)
    }
}

/// Fully connected projection of `[S_ca, z]` to a 4x4 map, then upsampling
/// blocks to the base resolution.
#[derive(Clone, Debug)]
pub struct InitialStage {
    fc: Linear,
    ups: Vec<UpBlock>,
    head: ImageHead,
    start_channels: usize,
}

impl InitialStage {
    pub fn new<T: Scalar, R: Rng + ?Sized>(ps: &mut ParamStore<T>, cfg: &GeneratorConfig, rng: &mut R) -> Self {
        let dm = cfg.channels;
        let start = 8 * dm;
        let fc = Linear::new(ps, "init.fc", cfg.ca_dim + cfg.noise_dim, 2 * start * 16, true, rng);
        let n_ups = (cfg.base_resolution / 4).trailing_zeros() as usize;
        let mut ups = Vec::with_capacity(n_ups);
        let mut cin = start;
        for k in 0..n_ups {
            let cout = if k + 1 == n_ups { dm } else { (cin / 2).max(dm) };
            ups.push(UpBlock::new(ps, &format!("init.up{k}"), cin, cout, rng));
            cin = cout;
        }
        let head = ImageHead::new(ps, "init.head", dm, rng);
        Self { fc, ups, head, start_channels: start }
    }

    /// `(image, features)` from `s_ca: [B, D_ca]` and `z: [B, D_z]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, s_ca: Var, z: Var) -> (Var, Var) {
        let b = g.shape(s_ca)[0];
        let x = g.concat(&[s_ca, z], 1);
        let x = self.fc.forward(g, ps, x);
        let x = g.glu(x);
        let mut h = g.reshape(x, &[b, self.start_channels, 4, 4]);
        for up in &self.ups {
            h = up.forward(g, ps, h);
        }
        (self.head.forward(g, ps, h), h)
    }
}

/// How word information enters a refinement stage.
#[derive(Clone, Debug)]
enum WordFusion {
    Affine(FfBlock),
    /// Ablation baseline: the word-context map is concatenated with the features.
    Concat(WordAttention),
}

/// Refinement stage: word fusion, optional sentence context, 1x1 joint
/// conv, residual blocks, upsampling and an image head.
#[derive(Clone, Debug)]
pub struct RefineStage {
    fusion: WordFusion,
    sentence: Option<SentenceAttention>,
    joint: Conv2d,
    res: Vec<ResBlock>,
    up: UpBlock,
    head: ImageHead,
}

/// Graph outputs of one refinement stage.
#[derive(Clone, Copy, Debug)]
pub struct RefineVars {
    pub image: Var,
    pub features: Var,
    /// `[B, L, N]` word attention over the previous stage's sub-regions.
    pub word_weights: Var,
    pub sentence_weights: Option<Var>,
}

impl RefineStage {
    pub fn new<T: Scalar, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, cfg: &GeneratorConfig, rng: &mut R) -> Self {
        let dm = cfg.channels;
        let (fusion, mut joint_in) = if cfg.use_ff_block {
            (WordFusion::Affine(FfBlock::new(ps, &format!("{name}.ff"), cfg.word_dim, dm, cfg.affine_mode, rng)), dm)
        } else {
            (WordFusion::Concat(WordAttention::new(ps, &format!("{name}.attn"), cfg.word_dim, dm, rng)), 2 * dm)
        };
        let sentence = cfg.use_gsr.then(|| {
            joint_in += dm;
            SentenceAttention::new(ps, &format!("{name}.gsr"), cfg.ca_dim, dm, rng)
        });
        let joint = Conv2d::new(ps, &format!("{name}.joint"), joint_in, dm, 1, 1, 0, true, rng);
        let res = (0..cfg.residual_blocks).map(|k| ResBlock::new(ps, &format!("{name}.res{k}"), dm, rng)).collect();
        let up = UpBlock::new(ps, &format!("{name}.up"), dm, dm, rng);
        let head = ImageHead::new(ps, &format!("{name}.head"), dm, rng);
        Self { fusion, sentence, joint, res, up, head }
    }

    pub fn uses_ff_block(&self) -> bool {
        matches!(self.fusion, WordFusion::Affine(_))
    }

    pub fn ff_block(&self) -> Option<&FfBlock> {
        match &self.fusion {
            WordFusion::Affine(b) => Some(b),
            WordFusion::Concat(_) => None,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        prev: Var,
        source: Var,
        words: Var,
        mask: &[bool],
        s_ca: Var,
        axis: AttnAxis,
    ) -> RefineVars {
        let (fused, word_weights) = match &self.fusion {
            WordFusion::Affine(block) => block.forward_with_source(g, ps, words, mask, source, prev, axis),
            WordFusion::Concat(attn) => {
                let (ctx, w) = attn.forward(g, ps, words, mask, source, axis);
                (g.concat(&[prev, ctx], 1), w)
            }
        };
        let mut parts = vec![fused];
        let mut sentence_weights = None;
        if let Some(sent) = &self.sentence {
            let (ctx, w) = sent.forward(g, ps, s_ca, source);
            parts.push(ctx);
            sentence_weights = Some(w);
        }
        let joint = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 1) };
        let mut h = self.joint.forward(g, ps, joint);
        for block in &self.res {
            h = block.forward(g, ps, h);
        }
        let features = self.up.forward(g, ps, h);
        let image = self.head.forward(g, ps, features);
        RefineVars { image, features, word_weights, sentence_weights }
    }
}

/// One stage's image and pre-head features (single sample).
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutput<T> {
    /// `[3, R, R]` in `[-1, 1]`.
    pub image: Tensor<T>,
    pub features: VisualFeatureMap<T>,
    pub stage_index: usize,
}

/// Standard normal noise of the configured dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseVector<T>(pub Tensor<T>);

impl<T: Scalar> NoiseVector<T> {
    pub fn sample<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self(Tensor::randn(&[dim], rng))
    }
}

/// Conditioning augmentation plus the three generator stages. Each stage
/// has its own parameter store; CA lives in the stage-0 store.
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub ca: CondAugment,
    pub initial: InitialStage,
    pub refiners: [RefineStage; 2],
}

/// Graph outputs of [`Generator::forward`].
#[derive(Clone, Debug)]
pub struct GeneratorVars {
    pub ca: CaVars,
    pub images: [Var; STAGES],
    pub features: [Var; STAGES],
    pub word_weights: [Var; 2],
    pub sentence_weights: [Option<Var>; 2],
}

impl Generator {
    pub fn new<T: Scalar, R: Rng + ?Sized>(config: GeneratorConfig, rng: &mut R) -> Result<(Self, [ParamStore<T>; STAGES])> {
        config.validate()?;
        let mut stores = [ParamStore::new(), ParamStore::new(), ParamStore::new()];
        let ca = CondAugment::new(&mut stores[0], "ca", config.sentence_dim, config.ca_dim, rng);
        let initial = InitialStage::new(&mut stores[0], &config, rng);
        let r1 = RefineStage::new(&mut stores[1], "refine1", &config, rng);
        let r2 = RefineStage::new(&mut stores[2], "refine2", &config, rng);
        Ok((Self { config, ca, initial, refiners: [r1, r2] }, stores))
    }

    /// `words: [B, L, D_w]`, `sentence: [B, D_w]`, `ca_noise: [B, D_ca]`
    /// (or `None` for the deterministic sample), `z: [B, D_z]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        stores: &[ParamStore<T>; STAGES],
        words: Var,
        mask: &[bool],
        sentence: Var,
        ca_noise: Option<Var>,
        z: Var,
    ) -> GeneratorVars {
        let ca = self.ca.forward(g, &stores[0], sentence, ca_noise);
        let (img0, h0) = self.initial.forward(g, &stores[0], ca.sample, z);
        let mut images = [img0; STAGES];
        let mut features = [h0; STAGES];
        let mut word_weights = [h0; 2];
        let mut sentence_weights = [None; 2];
        for (k, stage) in self.refiners.iter().enumerate() {
            let prev = features[k];
            let source = self.source(g, h0, prev, k);
            let out = stage.forward(g, &stores[k + 1], prev, source, words, mask, ca.sample, self.config.attn_axis);
            images[k + 1] = out.image;
            features[k + 1] = out.features;
            word_weights[k] = out.word_weights;
            sentence_weights[k] = out.sentence_weights;
        }
        GeneratorVars { ca, images, features, word_weights, sentence_weights }
    }

    fn source<T: Scalar>(&self, g: &mut Graph<T>, h0: Var, prev: Var, refine_index: usize) -> Var {
        match self.config.attention_source {
            AttentionSource::Chained => prev,
            AttentionSource::Initial => {
                let mut s = h0;
                for _ in 0..refine_index {
                    s = g.upsample2x(s);
                }
                s
            }
        }
    }

    fn check_stores<T: Scalar>(&self, stores: &[ParamStore<T>; STAGES]) -> Result<()> {
        let w = stores[0].get(self.ca.fc_weight()).shape();
        if w != [2 * self.config.ca_dim, self.config.sentence_dim] {
            return Err(config_err!("stage-0 parameters do not match the generator configuration"));
        }
        Ok(())
    }

    pub fn generate_initial<T: Scalar>(
        &self,
        stores: &[ParamStore<T>; STAGES],
        s_ca: &AugmentedSentence<T>,
        z: &NoiseVector<T>,
    ) -> Result<StageOutput<T>> {
        self.check_stores(stores)?;
        if s_ca.0.numel() != self.config.ca_dim || z.0.numel() != self.config.noise_dim {
            return Err(config_err!(
                "expected condition/noise widths {}/{}, got {}/{}",
                self.config.ca_dim,
                self.config.noise_dim,
                s_ca.0.numel(),
                z.0.numel()
            ));
        }
        let mut g = Graph::new();
        let s = g.constant(s_ca.0.clone().reshape(&[1, self.config.ca_dim])?);
        let zv = g.constant(z.0.clone().reshape(&[1, self.config.noise_dim])?);
        let (img, h) = self.initial.forward(&mut g, &stores[0], s, zv);
        stage_output(&g, img, h, 0)
    }

    /// Refines the last entry of `history` (stage outputs so far, starting
    /// with stage 0).
    pub fn refine_stage<T: Scalar>(
        &self,
        stores: &[ParamStore<T>; STAGES],
        history: &[StageOutput<T>],
        words: &WordFeatures<T>,
        s_ca: &AugmentedSentence<T>,
    ) -> Result<(StageOutput<T>, AttentionWeights<T>)> {
        let prev = history.last().ok_or_else(|| precondition_err!("no previous stage"))?;
        if prev.stage_index + 1 >= STAGES {
            return Err(precondition_err!("stage {} is already the last stage", prev.stage_index));
        }
        if words.dim() != self.config.word_dim || s_ca.0.numel() != self.config.ca_dim {
            return Err(config_err!("word or sentence width does not match the generator"));
        }
        if !words.mask.iter().any(|&m| m) {
            return Err(precondition_err!("every word is masked"));
        }
        let k = prev.stage_index;
        let mut g = Graph::new();
        let (l, dw) = (words.max_len(), words.dim());
        let w = g.constant(words.values.clone().reshape(&[1, l, dw])?);
        let s = g.constant(s_ca.0.clone().reshape(&[1, self.config.ca_dim])?);
        let prev_v = g.constant(prev.features.batched());
        let h0 = g.constant(history[0].features.batched());
        let source = self.source(&mut g, h0, prev_v, k);
        let out = self.refiners[k].forward(&mut g, &stores[k + 1], prev_v, source, w, &words.mask, s, self.config.attn_axis);
        let src_shape = g.shape(source).to_vec();
        let weights = AttentionWeights {
            values: g.value(out.word_weights).clone().reshape(&[l, src_shape[2] * src_shape[3]])?,
            axis: self.config.attn_axis,
            height: src_shape[2],
            width: src_shape[3],
        };
        Ok((stage_output(&g, out.image, out.features, k + 1)?, weights))
    }
}

fn stage_output<T: Scalar>(g: &Graph<T>, image: Var, features: Var, stage_index: usize) -> Result<StageOutput<T>> {
    let img = g.value(image);
    let r = img.dim(2);
    let f = g.value(features);
    let (c, h, w) = (f.dim(1), f.dim(2), f.dim(3));
    Ok(StageOutput {
        image: img.clone().reshape(&[3, r, r])?,
        features: VisualFeatureMap::new(f.clone().reshape(&[c, h, w])?)?,
        stage_index,
    })
}

/// Per-stage outputs of the full text-to-image pass for one caption,
/// plus the word attention of both refinement stages.
#[derive(Clone, Debug)]
pub struct PipelineOutput<T> {
    pub stages: Vec<StageOutput<T>>,
    pub attention: Vec<AttentionWeights<T>>,
}

/// Encodes the caption, applies CA and runs all three stages.
#[allow(clippy::too_many_arguments)]
pub fn forward_pipeline<T: Scalar>(
    encoder: &TextEncoder,
    encoder_params: &ParamStore<T>,
    generator: &Generator,
    stores: &[ParamStore<T>; STAGES],
    caption: &Caption,
    z: &NoiseVector<T>,
    ca_noise: &CaNoise<T>,
) -> Result<PipelineOutput<T>> {
    let (words, sentence) = encoder.encode(encoder_params, caption)?;
    let (s_ca, _) = generator.ca.condition_augment(&stores[0], &sentence, ca_noise)?;
    let mut stages = vec![generator.generate_initial(stores, &s_ca, z)?];
    let mut attention = Vec::with_capacity(2);
    for _ in 0..2 {
        let (next, w) = generator.refine_stage(stores, &stages, &words, &s_ca)?;
        stages.push(next);
        attention.push(w);
    }
    Ok(PipelineOutput { stages, attention })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub channels: usize,
    pub ca_dim: usize,
}

/// Strided 4x4 conv trunk down to 4x4 with an unconditional and a
/// sentence-conditioned logit head. Every convolution is spectrally
/// normalized.
#[derive(Clone, Debug)]
pub struct StageDiscriminator {
    pub resolution: usize,
    trunk: Vec<Conv2d>,
    uncond: Conv2d,
    cond: [Conv2d; 2],
    ca_dim: usize,
}

/// Graph outputs of a discriminator head pass; logits are `[B]`.
#[derive(Clone, Copy, Debug)]
pub struct DiscLogits {
    pub uncond: Var,
    pub cond: Var,
}

impl StageDiscriminator {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        resolution: usize,
        cfg: &DiscriminatorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if resolution < 8 || !resolution.is_power_of_two() {
            return Err(config_err!("discriminator resolution {resolution} must be a power of two >= 8"));
        }
        let downs = (resolution / 4).trailing_zeros() as usize;
        let mut trunk = Vec::with_capacity(downs);
        let mut cin = 3;
        for k in 0..downs {
            let cout = cfg.channels << k.min(3);
            trunk.push(Conv2d::new(ps, &format!("d.down{k}"), cin, cout, 4, 2, 1, true, rng).with_spectral_norm(ps, rng));
            cin = cout;
        }
        let uncond = Conv2d::new(ps, "d.uncond", cin, 1, 4, 1, 0, true, rng).with_spectral_norm(ps, rng);
        let c0 = Conv2d::same3(ps, "d.cond0", cin + cfg.ca_dim, cin, rng).with_spectral_norm(ps, rng);
        let c1 = Conv2d::new(ps, "d.cond1", cin, 1, 4, 1, 0, true, rng).with_spectral_norm(ps, rng);
        Ok(Self { resolution, trunk, uncond, cond: [c0, c1], ca_dim: cfg.ca_dim })
    }

    /// `image: [B, 3, R, R]` to trunk features `[B, C, 4, 4]`.
    pub fn features<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, image: Var) -> Var {
        let mut x = image;
        for conv in &self.trunk {
            x = conv.forward(g, ps, x);
            x = g.leaky_relu(x, SLOPE);
        }
        x
    }

    pub fn uncond_logits<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, features: Var) -> Var {
        let b = g.shape(features)[0];
        let u = self.uncond.forward(g, ps, features);
        g.reshape(u, &[b])
    }

    /// `s_ca: [B, D_ca]` replicated over the 4x4 grid.
    pub fn cond_logits<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, features: Var, s_ca: Var) -> Var {
        let b = g.shape(features)[0];
        let tiled = g.tile_spatial(s_ca, 4, 4);
        let x = g.concat(&[features, tiled], 1);
        let x = self.cond[0].forward(g, ps, x);
        let x = g.leaky_relu(x, SLOPE);
        let x = self.cond[1].forward(g, ps, x);
        g.reshape(x, &[b])
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, image: Var, s_ca: Var) -> DiscLogits {
        let f = self.features(g, ps, image);
        DiscLogits { uncond: self.uncond_logits(g, ps, f), cond: self.cond_logits(g, ps, f, s_ca) }
    }

    /// One power-iteration step for every convolution.
    pub fn power_iterate<T: Scalar>(&self, ps: &mut ParamStore<T>) {
        for conv in self.trunk.iter().chain([&self.uncond]).chain(&self.cond) {
            conv.power_iterate(ps);
        }
    }

    /// `(unconditional, conditional)` logits for one image `[3, R, R]`.
    pub fn discriminate<T: Scalar>(&self, ps: &ParamStore<T>, image: &Tensor<T>, s_ca: &AugmentedSentence<T>) -> Result<(T, T)> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || s[1] != self.resolution || s[2] != self.resolution {
            return Err(config_err!("discriminator for {r}x{r} got image {:?}", s, r = self.resolution));
        }
        if s_ca.0.numel() != self.ca_dim {
            return Err(config_err!("condition width {} != {}", s_ca.0.numel(), self.ca_dim));
        }
        let mut g = Graph::new();
        let img = g.constant(image.clone().reshape(&[1, 3, s[1], s[2]])?);
        let c = g.constant(s_ca.0.clone().reshape(&[1, self.ca_dim])?);
        let out = self.forward(&mut g, ps, img, c);
        let (u, c) = (g.value(out.uncond).item(), g.value(out.cond).item());
        if !(u.is_finite() && c.is_finite()) {
            return Err(Error::Numerical("non-finite discriminator logit".into()));
        }
        Ok((u, c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn config() -> GeneratorConfig {
        GeneratorConfig {
            sentence_dim: 8,
            word_dim: 8,
            ca_dim: 4,
            noise_dim: 3,
            channels: 2,
            base_resolution: 8,
            residual_blocks: 2,
            attn_axis: AttnAxis::Words,
            use_ff_block: true,
            use_gsr: true,
            attention_source: AttentionSource::Chained,
            affine_mode: AffineMode::PerElement,
        }
    }

    #[test]
    fn initial_stage_shapes_and_noise_sensitivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (gen, stores) = Generator::new::<f64, _>(config(), &mut rng).unwrap();
        let s = AugmentedSentence(Tensor::randn(&[4], &mut rng));
        let z1 = NoiseVector::sample(3, &mut rng);
        let z2 = NoiseVector::sample(3, &mut rng);
        let a = gen.generate_initial(&stores, &s, &z1).unwrap();
        let b = gen.generate_initial(&stores, &s, &z2).unwrap();
        assert_eq!(a.image.shape(), &[3, 8, 8]);
        assert_eq!(a.features.values().shape(), &[2, 8, 8]);
        assert_eq!(a, gen.generate_initial(&stores, &s, &z1).unwrap());
        assert!(a.image.max_abs_diff(&b.image) > 0.0);
        let bad = NoiseVector(Tensor::zeros(&[5]));
        assert!(matches!(gen.generate_initial(&stores, &s, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn refine_overflow_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (gen, stores) = Generator::new::<f64, _>(config(), &mut rng).unwrap();
        let s = AugmentedSentence(Tensor::randn(&[4], &mut rng));
        let words = WordFeatures { values: Tensor::randn(&[3, 8], &mut rng), mask: vec![true, true, false] };
        let mut hist = vec![gen.generate_initial(&stores, &s, &NoiseVector::sample(3, &mut rng)).unwrap()];
        for k in 1..3 {
            let (next, w) = gen.refine_stage(&stores, &hist, &words, &s).unwrap();
            assert_eq!(next.stage_index, k);
            assert_eq!(next.image.dim(1), 8 << k);
            assert_eq!(w.values.shape(), &[3, (4 << k) * (4 << k)]);
            hist.push(next);
        }
        assert!(matches!(gen.refine_stage(&stores, &hist, &words, &s), Err(Error::Precondition(_))));
    }

    #[test]
    fn bad_base_resolution() {
        let mut cfg = config();
        cfg.base_resolution = 12;
        assert!(matches!(Generator::new::<f32, _>(cfg, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Config(_))));
    }

    #[test]
    fn discriminator_rejects_wrong_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamStore::<f32>::new();
        let d = StageDiscriminator::new(&mut ps, 16, &DiscriminatorConfig { channels: 4, ca_dim: 4 }, &mut rng).unwrap();
        let s = AugmentedSentence(Tensor::zeros(&[4]));
        assert!(d.discriminate(&ps, &Tensor::zeros(&[3, 16, 16]), &s).is_ok());
        assert!(matches!(d.discriminate(&ps, &Tensor::zeros(&[3, 8, 8]), &s), Err(Error::Config(_))));
    }
}
