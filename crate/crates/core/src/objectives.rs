//! Adversarial, conditioning and image-text matching losses.
//!
//! Each loss exists twice: on plain values (probabilities, vectors) for
//! reporting, and on the graph (logits, [`Var`]s) for training.

use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{config_err, precondition_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::CaParams;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;
/// Weight of the real-image/mismatched-caption term inside the
/// conditional discriminator loss.
pub const MISMATCH_WEIGHT: f64 = 0.5;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn mean_log(ps: &[f64], complement: bool) -> f64 {
    let n = ps.len() as f64;
    ps.iter()
        .map(|&p| {
            let p = clamp_prob(p);
            Float::ln(if complement { 1.0 - p } else { p })
        })
        .sum::<f64>()
        / n
}

/// `-(log p_u + log p_c) / 2`, batch-averaged.
pub fn generator_stage_loss(p_uncond: &[f64], p_cond: &[f64]) -> f64 {
    -0.5 * mean_log(p_uncond, false) - 0.5 * mean_log(p_cond, false)
}

/// Discriminator loss for one stage; `p_mismatch` holds the conditional
/// probabilities of real images paired with wrong captions.
pub fn discriminator_stage_loss(
    p_real_u: &[f64],
    p_fake_u: &[f64],
    p_real_c: &[f64],
    p_fake_c: &[f64],
    p_mismatch: Option<&[f64]>,
) -> f64 {
    let mut inner = mean_log(p_real_u, false) + mean_log(p_fake_u, true) + mean_log(p_real_c, false) + mean_log(p_fake_c, true);
    if let Some(m) = p_mismatch {
        inner += MISMATCH_WEIGHT * mean_log(m, true);
    }
    -0.5 * inner
}

/// KL divergence of `N(mu, diag(exp(log_var)))` from `N(0, I)`, averaged
/// over the batch.
pub fn ca_regularizer<T: Scalar>(batch: &[CaParams<T>]) -> Result<f64> {
    if batch.is_empty() {
        return Err(precondition_err!("empty CA batch"));
    }
    let mut total = 0.0;
    for p in batch {
        if p.mu.numel() != p.log_var.numel() {
            return Err(config_err!("mu and log_var widths differ"));
        }
        total += p
            .mu
            .data()
            .iter()
            .zip(p.log_var.data())
            .map(|(&m, &lv)| {
                let (m, lv) = (m.as_f64(), lv.as_f64());
                0.5 * (m * m + Float::exp(lv) - 1.0 - lv)
            })
            .sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

/// Symmetric cross-entropy over the `gamma`-scaled cosine similarity matrix
/// of `image: [B, F]` and `text: [B, F]`, matched pairs on the diagonal.
pub fn damsm_loss<T: Scalar>(image: &Tensor<T>, text: &Tensor<T>, gamma: f64) -> Result<f64> {
    check_pairs(image.shape(), text.shape())?;
    let mut g = Graph::new();
    let i = g.constant(image.cast::<f64>());
    let t = g.constant(text.cast::<f64>());
    let loss = damsm_loss_var(&mut g, i, t, gamma);
    Ok(g.value(loss).item())
}

fn check_pairs(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != 2 || a != b {
        return Err(config_err!("matching features must be equal [B, F] matrices, got {a:?} and {b:?}"));
    }
    if a[0] < 2 {
        return Err(precondition_err!("matching loss needs at least two pairs"));
    }
    Ok(())
}

/// Per-stage generator and discriminator terms with their weighted totals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub generator: [f64; 3],
    pub discriminator: [f64; 3],
    pub ca: f64,
    pub damsm: f64,
    pub total_generator: f64,
    pub total_discriminator: f64,
}

impl LossBreakdown {
    pub fn new(generator: [f64; 3], discriminator: [f64; 3], ca: f64, damsm: f64, lambda1: f64, lambda2: f64) -> Self {
        let mut parts = Self { generator, discriminator, ca, damsm, ..Self::default() };
        parts.total_generator = total_generator_loss(&parts, lambda1, lambda2);
        parts.total_discriminator = total_discriminator_loss(&parts.discriminator);
        parts
    }

    pub fn is_finite(&self) -> bool {
        self.generator
            .iter()
            .chain(&self.discriminator)
            .chain([&self.ca, &self.damsm, &self.total_generator, &self.total_discriminator])
            .all(|v| v.is_finite())
    }
}

pub fn total_generator_loss(parts: &LossBreakdown, lambda1: f64, lambda2: f64) -> f64 {
    parts.generator.iter().sum::<f64>() + lambda1 * parts.ca + lambda2 * parts.damsm
}

pub fn total_discriminator_loss(stage_losses: &[f64; 3]) -> f64 {
    stage_losses.iter().sum()
}

/// Clamped sigmoid of logits.
pub fn probabilities<T: Scalar>(g: &mut Graph<T>, logits: Var) -> Var {
    let p = g.sigmoid(logits);
    g.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
}

fn mean_log_var<T: Scalar>(g: &mut Graph<T>, logits: Var, complement: bool) -> Var {
    let p = probabilities(g, logits);
    let q = if complement {
        let neg = g.scale(p, -1.0);
        g.add_scalar(neg, 1.0)
    } else {
        p
    };
    let l = g.log(q);
    g.mean_all(l)
}

/// Graph form of [`generator_stage_loss`] on logits `[B]`.
pub fn generator_stage_loss_var<T: Scalar>(g: &mut Graph<T>, uncond: Var, cond: Var) -> Var {
    let a = mean_log_var(g, uncond, false);
    let b = mean_log_var(g, cond, false);
    let s = g.add(a, b);
    g.scale(s, -0.5)
}

/// Logits `[B]` of one discriminator stage.
#[derive(Clone, Copy, Debug)]
pub struct StageLogits {
    pub real_uncond: Var,
    pub fake_uncond: Var,
    pub real_cond: Var,
    pub fake_cond: Var,
    pub mismatch_cond: Option<Var>,
}

/// Graph form of [`discriminator_stage_loss`].
pub fn discriminator_stage_loss_var<T: Scalar>(g: &mut Graph<T>, l: &StageLogits) -> Var {
    let mut terms: Vec<Var> = Vec::with_capacity(5);
    terms.push(mean_log_var(g, l.real_uncond, false));
    terms.push(mean_log_var(g, l.fake_uncond, true));
    terms.push(mean_log_var(g, l.real_cond, false));
    terms.push(mean_log_var(g, l.fake_cond, true));
    if let Some(m) = l.mismatch_cond {
        let t = mean_log_var(g, m, true);
        terms.push(g.scale(t, MISMATCH_WEIGHT));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.scale(acc, -0.5)
}

/// Graph form of [`ca_regularizer`] on `mu, log_var: [B, D_ca]`.
pub fn ca_regularizer_var<T: Scalar>(g: &mut Graph<T>, mu: Var, log_var: Var) -> Var {
    let b = g.shape(mu)[0];
    let mu2 = g.mul(mu, mu);
    let ev = g.exp(log_var);
    let s = g.add(mu2, ev);
    let s = g.sub(s, log_var);
    let s = g.add_scalar(s, -1.0);
    let total = g.sum_all(s);
    g.scale(total, 0.5 / b as f64)
}

/// Graph form of [`damsm_loss`]; rows are L2-normalized internally.
pub fn damsm_loss_var<T: Scalar>(g: &mut Graph<T>, image: Var, text: Var, gamma: f64) -> Var {
    let (b, f) = {
        let s = g.shape(image);
        (s[0], s[1])
    };
    let i = g.l2_normalize(image);
    let t = g.l2_normalize(text);
    let i = g.reshape(i, &[1, b, f]);
    let t = g.reshape(t, &[1, b, f]);
    let sim = g.bmm(i, t, false, true);
    let sim = g.reshape(sim, &[b, b]);
    let scores = g.scale(sim, gamma);
    symmetric_cross_entropy(g, scores)
}

/// Cross-entropy over rows plus over columns of `[B, B]` scores with the
/// matched pairs on the diagonal, averaged over the batch.
fn symmetric_cross_entropy<T: Scalar>(g: &mut Graph<T>, scores: Var) -> Var {
    let b = g.shape(scores)[0];
    let mut eye = Tensor::zeros(&[b, b]);
    for k in 0..b {
        eye.set(&[k, k], T::one());
    }
    let mut total = None;
    for axis in [1, 0] {
        let ls = g.log_softmax(scores, axis);
        let diag = g.mul_const(ls, eye.clone());
        let s = g.sum_all(diag);
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s),
        });
    }
    g.scale(total.expect("two directions"), -1.0 / b as f64)
}

/// Temperatures of the word-level matching term: region attention,
/// word aggregation and pair scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordMatchGammas {
    pub attention: f64,
    pub aggregation: f64,
    pub score: f64,
}

impl Default for WordMatchGammas {
    fn default() -> Self {
        Self { attention: 4.0, aggregation: 5.0, score: 10.0 }
    }
}

/// Word-level matching loss between image regions `[B, F, N]` and words
/// `[B, L, F]` (`mask` has `B * L` entries).
///
/// For every image/caption pair each real word attends over the regions
/// (softmax of `attention * e_t . v_n`), its relevance is the cosine between
/// the word and its region context, and the pair score is
/// `score * ln(sum_t exp(aggregation * R_t)) / aggregation`. The pair scores
/// then enter the same symmetric cross-entropy as [`damsm_loss_var`].
pub fn word_damsm_loss_var<T: Scalar>(g: &mut Graph<T>, regions: Var, words: Var, mask: &[bool], gammas: WordMatchGammas) -> Var {
    let (b, f) = {
        let s = g.shape(regions);
        (s[0], s[1])
    };
    let l = g.shape(words)[1];
    assert_eq!(mask.len(), b * l, "word mask length");
    // pair p = i * B + j: image i, caption j
    let p = b * b;
    let images: Vec<Var> = (0..b).map(|i| g.narrow(regions, 0, i, 1)).collect();
    let mut rep = Vec::with_capacity(p);
    for img in &images {
        rep.extend(core::iter::repeat_n(*img, b));
    }
    let v = g.concat(&rep, 0);
    let e = g.concat(&alloc::vec![words; b], 0);
    let pair_mask: Vec<bool> = (0..b).flat_map(|_| mask.iter().copied()).collect();

    let scores = g.bmm(e, v, false, false);
    let scores = g.scale(scores, gammas.attention);
    let attn = g.attn_softmax(scores, &pair_mask, crate::autograd::AttnAxis::Regions);
    let ctx = g.bmm(attn, v, false, true);
    let cn = g.l2_normalize(ctx);
    let en = g.l2_normalize(e);
    let prod = g.mul(cn, en);
    let ones_f = g.constant(Tensor::ones(&[p, f, 1]));
    let relevance = g.bmm(prod, ones_f, false, false);
    let relevance = g.reshape(relevance, &[p, 1, l]);
    let sharp = g.scale(relevance, gammas.aggregation);
    let sharp = g.exp(sharp);
    let keep = Tensor::from_vec(&[p, 1, l], pair_mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect())
        .expect("shape");
    let sharp = g.mul_const(sharp, keep);
    let ones_l = g.constant(Tensor::ones(&[p, l, 1]));
    let pooled = g.bmm(sharp, ones_l, false, false);
    let pooled = g.log(pooled);
    let pooled = g.reshape(pooled, &[b, b]);
    let pair = g.scale(pooled, gammas.score / gammas.aggregation);
    symmetric_cross_entropy(g, pair)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn generator_loss_values() {
        assert_abs_diff_eq!(generator_stage_loss(&[0.5], &[0.5]), 0.6931471805599453, epsilon = 1e-12);
        assert_abs_diff_eq!(generator_stage_loss(&[1.0], &[0.5]), 0.34657359027997264, epsilon = 1e-6);
        assert!(generator_stage_loss(&[1.0], &[1.0]) < 1e-6);
    }

    #[test]
    fn discriminator_loss_values() {
        assert!(discriminator_stage_loss(&[1.0], &[0.0], &[1.0], &[0.0], None) < 1e-6);
        assert_abs_diff_eq!(discriminator_stage_loss(&[0.5], &[0.5], &[0.5], &[0.5], None), 1.3862943611198906, epsilon = 1e-12);
        let fooled = discriminator_stage_loss(&[0.9], &[0.1], &[0.9], &[0.1], Some(&[0.9]));
        let sharp = discriminator_stage_loss(&[0.9], &[0.1], &[0.9], &[0.1], Some(&[0.1]));
        assert!(fooled > sharp);
    }

    #[test]
    fn kl_values() {
        let p = |mu: f64, lv: f64| CaParams::<f64> { mu: Tensor::from_f64(&[1], &[mu]).unwrap(), log_var: Tensor::from_f64(&[1], &[lv]).unwrap() };
        assert_eq!(ca_regularizer(&[p(0.0, 0.0)]).unwrap(), 0.0);
        assert_abs_diff_eq!(ca_regularizer(&[p(1.0, 0.0)]).unwrap(), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(ca_regularizer(&[p(0.0, 4.0f64.ln())]).unwrap(), 0.8068528194400546, epsilon = 1e-12);
        assert!(ca_regularizer::<f64>(&[]).is_err());
    }

    #[test]
    fn totals() {
        let parts = LossBreakdown::new([1.0; 3], [1.0, 2.0, 3.0], 0.2, 0.1, 1.0, 5.0);
        assert_abs_diff_eq!(parts.total_generator, 3.7, epsilon = 1e-12);
        assert_eq!(parts.total_discriminator, 6.0);
        let no_damsm = LossBreakdown::new([1.0; 3], [0.0; 3], 0.2, 123.0, 1.0, 0.0);
        assert_eq!(no_damsm.total_generator, 3.2);
        assert_eq!(total_discriminator_loss(&[0.0; 3]), 0.0);
    }

    #[test]
    fn damsm_identical_features_is_two_log_b() {
        for b in [2usize, 3, 5] {
            let x = Tensor::<f64>::full(&[b, 4], 0.7);
            assert_abs_diff_eq!(damsm_loss(&x, &x, 10.0).unwrap(), 2.0 * (b as f64).ln(), epsilon = 1e-9);
        }
    }

    #[test]
    fn damsm_orthogonal_pairs_vanish() {
        let mut x = Tensor::<f64>::zeros(&[3, 3]);
        for k in 0..3 {
            x.set(&[k, k], 1.0);
        }
        assert!(damsm_loss(&x, &x, 100.0).unwrap() < 1e-30);
        assert!(damsm_loss(&x, &x, 10.0).unwrap() < 1e-3);
    }

    #[test]
    fn damsm_rejects_single_pair() {
        let x = Tensor::<f64>::ones(&[1, 3]);
        assert!(matches!(damsm_loss(&x, &x, 10.0), Err(crate::Error::Precondition(_))));
        let y = Tensor::<f64>::ones(&[2, 4]);
        assert!(matches!(damsm_loss(&Tensor::ones(&[2, 3]), &y, 10.0), Err(crate::Error::Config(_))));
    }

    #[test]
    fn graph_and_value_adversarial_losses_agree() {
        let logits = [-1.5, 0.2, 2.0];
        let probs: Vec<f64> = logits.iter().map(|&x: &f64| 1.0 / (1.0 + (-x).exp())).collect();
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::from_f64(&[3], &logits).unwrap());
        let gl = generator_stage_loss_var(&mut g, v, v);
        assert_abs_diff_eq!(g.value(gl).item(), generator_stage_loss(&probs, &probs), epsilon = 1e-12);
        let l = StageLogits { real_uncond: v, fake_uncond: v, real_cond: v, fake_cond: v, mismatch_cond: Some(v) };
        let dl = discriminator_stage_loss_var(&mut g, &l);
        let expect = discriminator_stage_loss(&probs, &probs, &probs, &probs, Some(&probs));
        assert_abs_diff_eq!(g.value(dl).item(), expect, epsilon = 1e-12);
    }
}
