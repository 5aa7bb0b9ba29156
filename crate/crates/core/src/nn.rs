//! Parameterized layers. Each layer owns [`ParamId`]s into a caller-held
//! [`ParamStore`] and records its computation on a [`Graph`].

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::spectral;
use crate::tensor::Tensor;

/// Power-iteration steps run when spectral normalization is attached.
const SPECTRAL_WARMUP: usize = 30;

/// Fully connected layer, `y = x W^T + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = ps.add_uniform(&format!("{name}.weight"), &[out_features, in_features], in_features, rng);
        let bias = bias.then(|| ps.add_uniform(&format!("{name}.bias"), &[out_features], in_features, rng));
        Self { weight, bias, in_features, out_features }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(ps, self.weight);
        let b = self.bias.map(|b| g.param(ps, b));
        g.linear(x, w, b)
    }
}

/// 2-D convolution, optionally spectrally normalized.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    /// Power-iteration buffers `(u, v)` when spectrally normalized.
    pub spectral: Option<(ParamId, ParamId)>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = ps.add_uniform(&format!("{name}.weight"), &[cout, cin, kernel, kernel], fan_in, rng);
        let bias = bias.then(|| ps.add_uniform(&format!("{name}.bias"), &[cout], fan_in, rng));
        Self { weight, bias, stride, pad, spectral: None }
    }

    /// Same-size 3x3 convolution.
    pub fn same3<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(ps, name, cin, cout, 3, 1, 1, true, rng)
    }

    /// Adds spectral normalization. The power-iteration vectors start random
    /// and are warmed up so the first forward pass already sees a sensible
    /// singular-value estimate.
    pub fn with_spectral_norm<T: Scalar, R: Rng + ?Sized>(mut self, ps: &mut ParamStore<T>, rng: &mut R) -> Self {
        let shape = ps.get(self.weight).shape().to_vec();
        let rows = shape[0];
        let cols = shape[1..].iter().product();
        let name = String::from(ps.name(self.weight).trim_end_matches(".weight"));
        let u = spectral::random_unit::<T, R>(rows, rng);
        let v = spectral::random_unit::<T, R>(cols, rng);
        let u = ps.add_buffer(&format!("{name}.sn_u"), u);
        let v = ps.add_buffer(&format!("{name}.sn_v"), v);
        self.spectral = Some((u, v));
        for _ in 0..SPECTRAL_WARMUP {
            self.power_iterate(ps);
        }
        self
    }

    pub fn out_channels<T: Scalar>(&self, ps: &ParamStore<T>) -> usize {
        ps.get(self.weight).dim(0)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let mut w = g.param(ps, self.weight);
        if let Some((u, v)) = self.spectral {
            w = g.spectral_scale(w, ps.get(u).data(), ps.get(v).data());
        }
        let b = self.bias.map(|b| g.param(ps, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    /// One power-iteration step on the stored `(u, v)`; no-op without
    /// spectral normalization.
    pub fn power_iterate<T: Scalar>(&self, ps: &mut ParamStore<T>) {
        if let Some((u, v)) = self.spectral {
            let w = ps.get(self.weight).clone();
            let mut state = spectral::SpectralState::from_vectors(ps.get(u).clone(), ps.get(v).clone());
            state.power_iterate(&w);
            *ps.get_mut(u) = state.u;
            *ps.get_mut(v) = state.v;
        }
    }
}

/// Token embedding table.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let table = ps.add(&format!("{name}.table"), Tensor::randn(&[vocab, dim], rng));
        Self { table, dim }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, ids: &[usize]) -> Var {
        let t = g.param(ps, self.table);
        g.embedding(t, ids)
    }
}

/// Single-layer LSTM cell with gate order input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input: Linear,
    pub hidden: Linear,
    pub hidden_size: usize,
}

impl LstmCell {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        hidden_size: usize,
        rng: &mut R,
    ) -> Self {
        let input = Linear::new(ps, &format!("{name}.ih"), in_features, 4 * hidden_size, true, rng);
        let hidden = Linear::new(ps, &format!("{name}.hh"), hidden_size, 4 * hidden_size, false, rng);
        Self { input, hidden, hidden_size }
    }

    /// One step; returns the new `(h, c)`.
    pub fn step<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var, h: Var, c: Var) -> (Var, Var) {
        let hs = self.hidden_size;
        let a = self.input.forward(g, ps, x);
        let b = self.hidden.forward(g, ps, h);
        let gates = g.add(a, b);
        let i = g.narrow(gates, 1, 0, hs);
        let f = g.narrow(gates, 1, hs, hs);
        let cand = g.narrow(gates, 1, 2 * hs, hs);
        let o = g.narrow(gates, 1, 3 * hs, hs);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cand = g.tanh(cand);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c);
        let write = g.mul(i, cand);
        let c2 = g.add(keep, write);
        let tc = g.tanh(c2);
        let h2 = g.mul(o, tc);
        (h2, c2)
    }
}

/// `mask ? new : old`, row-wise over a `[B, H]` state, recorded on the graph.
pub(crate) fn select_rows<T: Scalar>(g: &mut Graph<T>, new: Var, old: Var, keep_new: &[bool]) -> Var {
    let shape = g.shape(new).to_vec();
    let width = shape[1];
    let on: Vec<T> = keep_new
        .iter()
        .flat_map(|&k| core::iter::repeat_n(if k { T::one() } else { T::zero() }, width))
        .collect();
    let off: Vec<T> = on.iter().map(|&v| T::one() - v).collect();
    let on = Tensor::from_vec(&shape, on).expect("mask shape");
    let off = Tensor::from_vec(&shape, off).expect("mask shape");
    let a = g.mul_const(new, on);
    let b = g.mul_const(old, off);
    g.add(a, b)
}
