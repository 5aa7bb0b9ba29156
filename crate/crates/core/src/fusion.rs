//! Word-conditioned affine modulation of visual features (the FF-Block).

use alloc::format;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionWeights, ContextMap, VisualFeatureMap, WordAttention};
use crate::autograd::{AttnAxis, Graph, Var};
use crate::error::{config_err, Error, Result};
use crate::nn::Conv2d;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::WordFeatures;

const SLOPE: f64 = 0.2;

/// Granularity of the predicted scale and shift.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AffineMode {
    /// One value per channel and sub-region.
    #[default]
    PerElement,
    /// One value per channel, broadcast over sub-regions.
    PerChannel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineParams<T> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
}

impl<T: Scalar> AffineParams<T> {
    pub fn identity(shape: &[usize]) -> Self {
        Self { scale: Tensor::ones(shape), shift: Tensor::zeros(shape) }
    }
}

/// `h * scale + shift`.
pub fn apply_affine<T: Scalar>(h: &VisualFeatureMap<T>, a: &AffineParams<T>) -> Result<VisualFeatureMap<T>> {
    let shape = h.values().shape();
    if a.scale.shape() != shape || a.shift.shape() != shape {
        return Err(config_err!(
            "affine maps {:?}/{:?} do not match feature map {:?}",
            a.scale.shape(),
            a.shift.shape(),
            shape
        ));
    }
    let data = h
        .values()
        .data()
        .iter()
        .zip(a.scale.data())
        .zip(a.shift.data())
        .map(|((&x, &s), &b)| x * s + b)
        .collect();
    VisualFeatureMap::new(Tensor::from_vec(shape, data)?)
}

/// Two conv stacks (conv3, leaky ReLU, conv3) predicting scale and shift
/// from a context map. The final convolutions start at zero weight with
/// bias 1 (scale) and 0 (shift), so the block starts as the identity.
#[derive(Clone, Debug)]
pub struct AffinePredictor {
    scale: [Conv2d; 2],
    shift: [Conv2d; 2],
    pub mode: AffineMode,
}

impl AffinePredictor {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        mode: AffineMode,
        rng: &mut R,
    ) -> Self {
        let mut stack = |tag: &str, bias: f64| {
            let first = Conv2d::same3(ps, &format!("{name}.{tag}0"), channels, channels, rng);
            let last = Conv2d::same3(ps, &format!("{name}.{tag}1"), channels, channels, rng);
            *ps.get_mut(last.weight) = Tensor::zeros(&[channels, channels, 3, 3]);
            *ps.get_mut(last.bias.expect("bias")) = Tensor::full(&[channels], T::of(bias));
            [first, last]
        };
        let scale = stack("scale", 1.0);
        let shift = stack("shift", 0.0);
        Self { scale, shift, mode }
    }

    fn stack<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, convs: &[Conv2d; 2], f: Var) -> Var {
        let x = convs[0].forward(g, ps, f);
        let x = g.leaky_relu(x, SLOPE);
        let x = convs[1].forward(g, ps, x);
        match self.mode {
            AffineMode::PerElement => x,
            AffineMode::PerChannel => {
                let s = g.shape(x).to_vec();
                let m = g.mean_spatial(x);
                g.tile_spatial(m, s[2], s[3])
            }
        }
    }

    /// `f: [B, D_m, H, W]` to `(scale, shift)` of the same shape.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, f: Var) -> (Var, Var) {
        let scale = self.stack(g, ps, &self.scale, f);
        let shift = self.stack(g, ps, &self.shift, f);
        (scale, shift)
    }

    pub fn channels<T: Scalar>(&self, ps: &ParamStore<T>) -> usize {
        self.scale[0].out_channels(ps)
    }

    pub fn predict_affine<T: Scalar>(&self, ps: &ParamStore<T>, f: &ContextMap<T>) -> Result<AffineParams<T>> {
        let shape = f.values.shape().to_vec();
        if shape.len() != 3 || shape[0] != self.channels(ps) {
            return Err(config_err!("context map {:?} does not have {} channels", shape, self.channels(ps)));
        }
        if !f.values.is_finite() {
            return Err(Error::Numerical("context map has non-finite entries".into()));
        }
        let mut g = Graph::new();
        let x = g.constant(f.values.clone().reshape(&[1, shape[0], shape[1], shape[2]])?);
        let (scale, shift) = self.forward(&mut g, ps, x);
        Ok(AffineParams {
            scale: g.value(scale).clone().reshape(&shape)?,
            shift: g.value(shift).clone().reshape(&shape)?,
        })
    }
}

/// Word attention followed by predicted affine modulation.
#[derive(Clone, Debug)]
pub struct FfBlock {
    pub attention: WordAttention,
    pub affine: AffinePredictor,
}

impl FfBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        word_dim: usize,
        channels: usize,
        mode: AffineMode,
        rng: &mut R,
    ) -> Self {
        let attention = WordAttention::new(ps, &format!("{name}.attn"), word_dim, channels, rng);
        let affine = AffinePredictor::new(ps, &format!("{name}.affine"), channels, mode, rng);
        Self { attention, affine }
    }

    /// Returns the modulated features and the attention weights `[B, L, N]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        words: Var,
        mask: &[bool],
        h: Var,
        axis: AttnAxis,
    ) -> (Var, Var) {
        self.forward_with_source(g, ps, words, mask, h, h, axis)
    }

    /// Attends over `source` and modulates `target`; both `[B, D_m, H, W]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_with_source<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        words: Var,
        mask: &[bool],
        source: Var,
        target: Var,
        axis: AttnAxis,
    ) -> (Var, Var) {
        let (ctx, weights) = self.attention.forward(g, ps, words, mask, source, axis);
        let (scale, shift) = self.affine.forward(g, ps, ctx);
        let scaled = g.mul(target, scale);
        (g.add(scaled, shift), weights)
    }

    pub fn ff_block<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        words: &WordFeatures<T>,
        h: &VisualFeatureMap<T>,
        axis: AttnAxis,
    ) -> Result<(VisualFeatureMap<T>, AttentionWeights<T>)> {
        let (ctx, weights) = self.attention.word_context(ps, words, h, axis)?;
        let affine = self.affine.predict_affine(ps, &ctx)?;
        Ok((apply_affine(h, &affine)?, weights))
    }
}
