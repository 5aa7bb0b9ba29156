//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] records every operation together with its output value.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients.
//! Parameters enter the tape by value (cloned from a [`ParamStore`]), so a
//! graph never borrows the stores and optimizers may update them while a
//! graph is still alive.

use alloc::vec;
use alloc::vec::Vec;

use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{gemm, MatMut, MatRef, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Softmax axis of a `[batch, words, regions]` score tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnAxis {
    /// Normalize over words: every region holds a convex combination of words.
    Words,
    /// Normalize over regions: every word distributes its mass over the map.
    Regions,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param { tag: u64, id: ParamId },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulConst(Var, Tensor<T>),
    Linear { x: Var, w: Var, b: Option<Var> },
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Upsample2x(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Glu(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, T, T),
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Reshape(Var),
    AttnSoftmax { x: Var, axis: AttnAxis },
    LogSoftmax { x: Var, axis: usize },
    SumAll(Var),
    MeanSpatial(Var),
    TileSpatial(Var),
    L2Normalize(Var),
    SpectralScale { w: Var, u: Vec<T>, v: Vec<T>, sigma: T },
    Embedding { table: Var, ids: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The recorded tape.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    frozen: Vec<u64>,
}

/// Gradients of a scalar with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}

/// Splits a shape into `(outer, len, inner)` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), frozen: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameters of `store` enter later graphs as constants.
    pub fn freeze(&mut self, store: &ParamStore<T>) {
        if !self.frozen.contains(&store.tag()) {
            self.frozen.push(store.tag());
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let tag = store.tag();
        let trainable = store.is_trainable(id) && !self.frozen.contains(&tag);
        if trainable {
            self.push(store.get(id).clone(), Op::Param { tag, id }, true)
        } else {
            self.push(store.get(id).clone(), Op::Leaf, false)
        }
    }

    /// Same value, cut from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_vec(va.shape(), data).expect("shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let t = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    /// Elementwise product with a constant tensor (masks, selectors).
    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), c.shape(), "mul_const shape mismatch");
        let data = va.data().iter().zip(c.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::from_vec(va.shape(), data).expect("shape");
        let rg = self.rg(a);
        self.push(t, Op::MulConst(a, c), rg)
    }

    /// `x w^T + b` for `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        assert_eq!(vx.ndim(), 2, "linear input must be 2-D");
        let (n, fin) = (vx.dim(0), vx.dim(1));
        let fout = vw.dim(0);
        assert_eq!(vw.dim(1), fin, "linear weight/input mismatch");
        let mut out = Tensor::zeros(&[n, fout]);
        if let Some(b) = b {
            let vb = self.value(b).data();
            for row in out.data_mut().chunks_exact_mut(fout) {
                row.copy_from_slice(vb);
            }
        }
        gemm(
            n,
            fin,
            fout,
            T::one(),
            MatRef::row_major(vx.data(), fin),
            MatRef::transposed(vw.data(), fin),
            if b.is_some() { T::one() } else { T::zero() },
            MatMut::row_major(out.data_mut(), fout),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    /// Batched product of `[B, m, k]` and `[B, k, n]`; `ta`/`tb` read the
    /// stored operand as its transpose over the last two axes.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.ndim() == 3 && vb.ndim() == 3, "bmm operands must be 3-D");
        let batch = va.dim(0);
        assert_eq!(vb.dim(0), batch);
        let (m, k) = if ta { (va.dim(2), va.dim(1)) } else { (va.dim(1), va.dim(2)) };
        let (k2, n) = if tb { (vb.dim(2), vb.dim(1)) } else { (vb.dim(1), vb.dim(2)) };
        assert_eq!(k, k2, "bmm inner dimension mismatch");
        let mut out = Tensor::zeros(&[batch, m, n]);
        for i in 0..batch {
            let sa = &va.data()[i * m * k..(i + 1) * m * k];
            let sb = &vb.data()[i * k * n..(i + 1) * k * n];
            let so = &mut out.data_mut()[i * m * n..(i + 1) * m * n];
            gemm(m, k, n, T::one(), view(sa, m, k, ta), view(sb, k, n, tb), T::zero(), MatMut::row_major(so, n));
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Bmm { a, b, ta, tb }, rg)
    }

    /// 2-D convolution, `x: [B, C, H, W]`, `w: [O, C, kh, kw]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        assert_eq!(vx.ndim(), 4, "conv2d input must be [B,C,H,W]");
        let (batch, c, h, wd) = (vx.dim(0), vx.dim(1), vx.dim(2), vx.dim(3));
        let (o, kh, kw) = (vw.dim(0), vw.dim(2), vw.dim(3));
        assert_eq!(vw.dim(1), c, "conv2d channel mismatch: input {} weight {}", c, vw.dim(1));
        let geom = ConvGeom::new(c, h, wd, kh, kw, stride, pad).expect("kernel larger than padded input");
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let mut out = Tensor::zeros(&[batch, o, geom.oh, geom.ow]);
        let mut col = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * cols] };
        for i in 0..batch {
            let xs = &vx.data()[i * c * h * wd..(i + 1) * c * h * wd];
            let ys = &mut out.data_mut()[i * o * cols..(i + 1) * o * cols];
            if let Some(b) = b {
                let vb = self.nodes[b.0].value.data();
                for (row, &bias) in ys.chunks_exact_mut(cols).zip(vb) {
                    row.fill(bias);
                }
            }
            let src: &[T] = if geom.is_pointwise() {
                xs
            } else {
                kernels::im2col(xs, &geom, &mut col);
                &col
            };
            gemm(
                o,
                rows,
                cols,
                T::one(),
                MatRef::row_major(vw.data(), rows),
                MatRef::row_major(src, cols),
                if b.is_some() { T::one() } else { T::zero() },
                MatMut::row_major(ys, cols),
            );
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Conv2d { x, w, b, geom }, rg)
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        assert_eq!(s.len(), 4);
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut out = Tensor::zeros(&[s[0], s[1], 2 * h, 2 * w]);
        kernels::upsample2x(vx.data(), planes, h, w, out.data_mut());
        let rg = self.rg(x);
        self.push(out, Op::Upsample2x(x), rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::of(slope);
        self.unary(x, move |v| if v > T::zero() { v } else { v * s }, Op::LeakyRelu(x, s))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::of(lo), T::of(hi));
        self.unary(x, move |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    /// Gated linear unit over axis 1: first half times sigmoid of second half.
    pub fn glu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.shape().to_vec();
        assert!(s[1] % 2 == 0, "glu needs an even channel count");
        let half = s[1] / 2;
        let inner: usize = s[2..].iter().product();
        let mut oshape = s.clone();
        oshape[1] = half;
        let mut out = Tensor::zeros(&oshape);
        for b in 0..s[0] {
            let src = &vx.data()[b * 2 * half * inner..(b + 1) * 2 * half * inner];
            let (lin, gate) = src.split_at(half * inner);
            let dst = &mut out.data_mut()[b * half * inner..(b + 1) * half * inner];
            for ((d, &a), &g) in dst.iter_mut().zip(lin).zip(gate) {
                *d = a * sigmoid(g);
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Glu(x), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let first = self.value(parts[0]).shape().to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch {:?} vs {:?}", s, first);
            }
            total += s[axis];
        }
        let mut oshape = first.clone();
        oshape[axis] = total;
        let (outer, _, inner) = split_axis(&oshape, axis);
        let mut out = Tensor::zeros(&oshape);
        let mut offset = 0;
        for &p in parts {
            let len = self.value(p).dim(axis);
            let src = self.value(p).data();
            for o in 0..outer {
                let d0 = (o * total + offset) * inner;
                out.data_mut()[d0..d0 + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            offset += len;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::Concat { parts: parts.to_vec(), axis }, rg)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let (outer, full, inner) = split_axis(vx.shape(), axis);
        assert!(start + len <= full, "narrow out of range");
        let mut oshape = vx.shape().to_vec();
        oshape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s0 = (o * full + start) * inner;
            data.extend_from_slice(&vx.data()[s0..s0 + len * inner]);
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&oshape, data).expect("shape"), Op::Narrow { x, axis, start }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape).expect("reshape element count");
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg)
    }

    /// Masked softmax of attention scores `[B, L, N]`; `mask` has `B*L`
    /// entries. Masked words get exactly zero weight.
    pub fn attn_softmax(&mut self, x: Var, mask: &[bool], axis: AttnAxis) -> Var {
        let vx = self.value(x);
        let (b, l, n) = (vx.dim(0), vx.dim(1), vx.dim(2));
        assert_eq!(mask.len(), b * l, "attention mask length");
        let mut out = Tensor::zeros(vx.shape());
        let xd = vx.data();
        let od = out.data_mut();
        match axis {
            AttnAxis::Words => {
                for bi in 0..b {
                    for j in 0..n {
                        let idx = |i: usize| (bi * l + i) * n + j;
                        let valid = (0..l).filter(|&i| mask[bi * l + i]);
                        let mx = valid.clone().map(|i| xd[idx(i)]).fold(T::neg_infinity(), T::max);
                        if mx == T::neg_infinity() {
                            continue;
                        }
                        let mut z = T::zero();
                        for i in valid.clone() {
                            let e = (xd[idx(i)] - mx).exp();
                            od[idx(i)] = e;
                            z += e;
                        }
                        for i in valid {
                            od[idx(i)] /= z;
                        }
                    }
                }
            }
            AttnAxis::Regions => {
                for row in 0..b * l {
                    if !mask[row] {
                        continue;
                    }
                    softmax_into(&xd[row * n..(row + 1) * n], &mut od[row * n..(row + 1) * n]);
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::AttnSoftmax { x, axis }, rg)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Var {
        let vx = self.value(x);
        let (outer, len, inner) = split_axis(vx.shape(), axis);
        let mut out = Tensor::zeros(vx.shape());
        let xd = vx.data();
        let od = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mx = (0..len).map(|k| xd[at(k)]).fold(T::neg_infinity(), T::max);
                let lse = mx + (0..len).map(|k| (xd[at(k)] - mx).exp()).sum::<T>().ln();
                for k in 0..len {
                    od[at(k)] = xd[at(k)] - lse;
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::LogSoftmax { x, axis }, rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(t, Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// `[B, C, H, W] -> [B, C]` spatial average.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (b, c) = (vx.dim(0), vx.dim(1));
        let hw: usize = vx.shape()[2..].iter().product();
        let inv = T::one() / T::of(hw as f64);
        let data = vx.data().chunks_exact(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[b, c], data).expect("shape"), Op::MeanSpatial(x), rg)
    }

    /// `[B, C] -> [B, C, h, w]` by replication.
    pub fn tile_spatial(&mut self, x: Var, h: usize, w: usize) -> Var {
        let vx = self.value(x);
        let (b, c) = (vx.dim(0), vx.dim(1));
        let mut data = Vec::with_capacity(b * c * h * w);
        for &v in vx.data() {
            data.extend(core::iter::repeat_n(v, h * w));
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[b, c, h, w], data).expect("shape"), Op::TileSpatial(x), rg)
    }

    /// Normalizes each row of `[n, d]` to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let d = vx.dim(vx.ndim() - 1);
        let mut out = vx.clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            let norm = row_norm(row);
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::L2Normalize(x), rg)
    }

    /// `w / sigma` with `sigma = u^T W v` for fixed singular-vector
    /// estimates `u` and `v` (W is `w` viewed as `[out, rest]`).
    pub fn spectral_scale(&mut self, w: Var, u: &[T], v: &[T]) -> Var {
        let vw = self.value(w);
        let rows = vw.dim(0);
        let cols = vw.numel() / rows;
        assert!(u.len() == rows && v.len() == cols, "spectral vectors do not match weight");
        let mut sigma = T::zero();
        for (r, &ur) in u.iter().enumerate() {
            let row = &vw.data()[r * cols..(r + 1) * cols];
            sigma += ur * row.iter().zip(v).map(|(&a, &b)| a * b).sum::<T>();
        }
        let sigma = sigma.max(T::of(1e-12));
        let out = vw.map(|x| x / sigma);
        let rg = self.rg(w);
        self.push(out, Op::SpectralScale { w, u: u.to_vec(), v: v.to_vec(), sigma }, rg)
    }

    /// Row lookup into `table: [V, E]`, giving `[ids.len(), E]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let vt = self.value(table);
        let e = vt.dim(1);
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            data.extend_from_slice(&vt.data()[id * e..(id + 1) * e]);
        }
        let rg = self.rg(table);
        self.push(
            Tensor::from_vec(&[ids.len(), e], data).expect("shape"),
            Op::Embedding { table, ids: ids.to_vec() },
            rg,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let gy = match &self.nodes[i].op {
                Op::Leaf | Op::Param { .. } => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(i, &gy, &mut grads);
        }
        Gradients { grads }
    }

    /// Gradients for every trainable parameter of `store` that appears on
    /// the tape (summed over repeated uses), indexed by [`ParamId`].
    pub fn param_grads(&self, grads: &Gradients<T>, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        let mut out: Vec<Option<Tensor<T>>> = vec![None; store.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param { tag, id } = node.op {
                if tag != store.tag() {
                    continue;
                }
                if let Some(g) = &grads.grads[i] {
                    match &mut out[id.0] {
                        Some(acc) => acc.add_assign(g),
                        slot => *slot = Some(g.clone()),
                    }
                }
            }
        }
        out
    }

    fn backprop_node(&self, i: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param { .. } => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |g| axpy(g, gy.data(), T::one()));
                self.acc(grads, *b, |g| axpy(g, gy.data(), T::one()));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |g| axpy(g, gy.data(), T::one()));
                self.acc(grads, *b, |g| axpy(g, gy.data(), -T::one()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |g| {
                    for ((g, &d), &o) in g.iter_mut().zip(gy.data()).zip(vb) {
                        *g += d * o;
                    }
                });
                self.acc(grads, *b, |g| {
                    for ((g, &d), &o) in g.iter_mut().zip(gy.data()).zip(va) {
                        *g += d * o;
                    }
                });
            }
            Op::Scale(a, s) => self.acc(grads, *a, |g| axpy(g, gy.data(), *s)),
            Op::AddScalar(a) | Op::Reshape(a) => self.acc(grads, *a, |g| axpy(g, gy.data(), T::one())),
            Op::MulConst(a, c) => self.acc(grads, *a, |g| {
                for ((g, &d), &o) in g.iter_mut().zip(gy.data()).zip(c.data()) {
                    *g += d * o;
                }
            }),
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, fin, fout) = (vx.dim(0), vx.dim(1), vw.dim(0));
                self.acc(grads, *x, |g| {
                    gemm(
                        n,
                        fout,
                        fin,
                        T::one(),
                        MatRef::row_major(gy.data(), fout),
                        MatRef::row_major(vw.data(), fin),
                        T::one(),
                        MatMut::row_major(g, fin),
                    )
                });
                self.acc(grads, *w, |g| {
                    gemm(
                        fout,
                        n,
                        fin,
                        T::one(),
                        MatRef::transposed(gy.data(), fout),
                        MatRef::row_major(vx.data(), fin),
                        T::one(),
                        MatMut::row_major(g, fin),
                    )
                });
                if let Some(b) = b {
                    self.acc(grads, *b, |g| {
                        for row in gy.data().chunks_exact(fout) {
                            axpy(g, row, T::one());
                        }
                    });
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let batch = va.dim(0);
                let (m, k) = if *ta { (va.dim(2), va.dim(1)) } else { (va.dim(1), va.dim(2)) };
                let n = if *tb { vb.dim(1) } else { vb.dim(2) };
                self.acc(grads, *a, |g| {
                    for i in 0..batch {
                        let sg = &gy.data()[i * m * n..(i + 1) * m * n];
                        let sb = &vb.data()[i * k * n..(i + 1) * k * n];
                        let ga = &mut g[i * m * k..(i + 1) * m * k];
                        // dA = dC B^T, written through A's storage layout
                        gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            MatRef::row_major(sg, n),
                            view(sb, k, n, *tb).t(),
                            T::one(),
                            view_mut(ga, m, k, *ta),
                        );
                    }
                });
                self.acc(grads, *b, |g| {
                    for i in 0..batch {
                        let sg = &gy.data()[i * m * n..(i + 1) * m * n];
                        let sa = &va.data()[i * m * k..(i + 1) * m * k];
                        let gb = &mut g[i * k * n..(i + 1) * k * n];
                        gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            view(sa, m, k, *ta).t(),
                            MatRef::row_major(sg, n),
                            T::one(),
                            view_mut(gb, k, n, *tb),
                        );
                    }
                });
            }
            Op::Conv2d { x, w, b, geom } => self.conv_backward(*x, *w, *b, geom, gy, grads),
            Op::Upsample2x(x) => {
                let s = self.value(*x).shape();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                self.acc(grads, *x, |g| kernels::upsample2x_backward(gy.data(), planes, h, w, g));
            }
            Op::LeakyRelu(x, s) => {
                let vx = self.value(*x).data();
                self.acc(grads, *x, |g| {
                    for ((g, &d), &v) in g.iter_mut().zip(gy.data()).zip(vx) {
                        *g += if v > T::zero() { d } else { d * *s };
                    }
                });
            }
            Op::Tanh(x) => self.acc(grads, *x, |g| {
                for ((g, &d), &t) in g.iter_mut().zip(gy.data()).zip(y.data()) {
                    *g += d * (T::one() - t * t);
                }
            }),
            Op::Sigmoid(x) => self.acc(grads, *x, |g| {
                for ((g, &d), &s) in g.iter_mut().zip(gy.data()).zip(y.data()) {
                    *g += d * s * (T::one() - s);
                }
            }),
            Op::Exp(x) => self.acc(grads, *x, |g| {
                for ((g, &d), &e) in g.iter_mut().zip(gy.data()).zip(y.data()) {
                    *g += d * e;
                }
            }),
            Op::Log(x) => {
                let vx = self.value(*x).data();
                self.acc(grads, *x, |g| {
                    for ((g, &d), &v) in g.iter_mut().zip(gy.data()).zip(vx) {
                        *g += d / v;
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let vx = self.value(*x).data();
                self.acc(grads, *x, |g| {
                    for ((g, &d), &v) in g.iter_mut().zip(gy.data()).zip(vx) {
                        if v >= *lo && v <= *hi {
                            *g += d;
                        }
                    }
                });
            }
            Op::Glu(x) => {
                let vx = self.value(*x);
                let s = vx.shape();
                let half = s[1] / 2;
                let inner: usize = s[2..].iter().product();
                self.acc(grads, *x, |g| {
                    for bi in 0..s[0] {
                        let src = &vx.data()[bi * 2 * half * inner..(bi + 1) * 2 * half * inner];
                        let (lin, gate) = src.split_at(half * inner);
                        let gsl = &mut g[bi * 2 * half * inner..(bi + 1) * 2 * half * inner];
                        let (glin, ggate) = gsl.split_at_mut(half * inner);
                        let d = &gy.data()[bi * half * inner..(bi + 1) * half * inner];
                        for k in 0..half * inner {
                            let sg = sigmoid(gate[k]);
                            glin[k] += d[k] * sg;
                            ggate[k] += d[k] * lin[k] * sg * (T::one() - sg);
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let total = y.dim(*axis);
                let (outer, _, inner) = split_axis(y.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).dim(*axis);
                    self.acc(grads, p, |g| {
                        for o in 0..outer {
                            let s0 = (o * total + offset) * inner;
                            axpy(&mut g[o * len * inner..(o + 1) * len * inner], &gy.data()[s0..s0 + len * inner], T::one());
                        }
                    });
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = split_axis(self.value(*x).shape(), *axis);
                let len = y.dim(*axis);
                self.acc(grads, *x, |g| {
                    for o in 0..outer {
                        let d0 = (o * full + start) * inner;
                        axpy(&mut g[d0..d0 + len * inner], &gy.data()[o * len * inner..(o + 1) * len * inner], T::one());
                    }
                });
            }
            Op::AttnSoftmax { x, axis } => {
                let (b, l, n) = (y.dim(0), y.dim(1), y.dim(2));
                let yd = y.data();
                let gd = gy.data();
                self.acc(grads, *x, |g| match axis {
                    AttnAxis::Words => {
                        for bi in 0..b {
                            for j in 0..n {
                                let idx = |i: usize| (bi * l + i) * n + j;
                                let dot: T = (0..l).map(|i| yd[idx(i)] * gd[idx(i)]).sum();
                                for i in 0..l {
                                    g[idx(i)] += yd[idx(i)] * (gd[idx(i)] - dot);
                                }
                            }
                        }
                    }
                    AttnAxis::Regions => {
                        for row in 0..b * l {
                            let ys = &yd[row * n..(row + 1) * n];
                            let gs = &gd[row * n..(row + 1) * n];
                            let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                            for ((g, &yv), &gv) in g[row * n..(row + 1) * n].iter_mut().zip(ys).zip(gs) {
                                *g += yv * (gv - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = split_axis(y.shape(), *axis);
                self.acc(grads, *x, |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let gsum: T = (0..len).map(|k| gy.data()[at(k)]).sum();
                            for k in 0..len {
                                g[at(k)] += gy.data()[at(k)] - y.data()[at(k)].exp() * gsum;
                            }
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let d = gy.item();
                self.acc(grads, *x, |g| g.iter_mut().for_each(|g| *g += d));
            }
            Op::MeanSpatial(x) => {
                let hw: usize = self.value(*x).shape()[2..].iter().product();
                let inv = T::one() / T::of(hw as f64);
                self.acc(grads, *x, |g| {
                    for (plane, &d) in g.chunks_exact_mut(hw).zip(gy.data()) {
                        plane.iter_mut().for_each(|g| *g += d * inv);
                    }
                });
            }
            Op::TileSpatial(x) => {
                let hw = y.dim(2) * y.dim(3);
                self.acc(grads, *x, |g| {
                    for (g, plane) in g.iter_mut().zip(gy.data().chunks_exact(hw)) {
                        *g += plane.iter().copied().sum::<T>();
                    }
                });
            }
            Op::L2Normalize(x) => {
                let vx = self.value(*x);
                let d = vx.dim(vx.ndim() - 1);
                self.acc(grads, *x, |g| {
                    for ((g, xr), (yr, gr)) in g
                        .chunks_exact_mut(d)
                        .zip(vx.data().chunks_exact(d))
                        .zip(y.data().chunks_exact(d).zip(gy.data().chunks_exact(d)))
                    {
                        let norm = row_norm(xr);
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((g, &yv), &gv) in g.iter_mut().zip(yr).zip(gr) {
                            *g += (gv - yv * dot) / norm;
                        }
                    }
                });
            }
            Op::SpectralScale { w, u, v, sigma } => {
                let vw = self.value(*w);
                let cols = v.len();
                // d(W/s) = dY/s - <dY, W>/s^2 * u v^T
                let inner: T = gy.data().iter().zip(vw.data()).map(|(&a, &b)| a * b).sum();
                let coef = inner / (*sigma * *sigma);
                self.acc(grads, *w, |g| {
                    for (r, &ur) in u.iter().enumerate() {
                        for c in 0..cols {
                            let k = r * cols + c;
                            g[k] += gy.data()[k] / *sigma - coef * ur * v[c];
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let e = y.dim(1);
                self.acc(grads, *table, |g| {
                    for (row, &id) in ids.iter().enumerate() {
                        axpy(&mut g[id * e..(id + 1) * e], &gy.data()[row * e..(row + 1) * e], T::one());
                    }
                });
            }
        }
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (vx, vw) = (self.value(x), self.value(w));
        let batch = vx.dim(0);
        let o = vw.dim(0);
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let in_size = geom.c * geom.h * geom.w;
        if let Some(b) = b {
            self.acc(grads, b, |g| {
                for (k, plane) in gy.data().chunks_exact(cols).enumerate() {
                    g[k % o] += plane.iter().copied().sum::<T>();
                }
            });
        }
        let need_w = self.rg(w);
        let need_x = self.rg(x);
        let mut col = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * cols] };
        if need_w {
            let mut gw_acc = vec![T::zero(); o * rows];
            for i in 0..batch {
                let xs = &vx.data()[i * in_size..(i + 1) * in_size];
                let src: &[T] = if geom.is_pointwise() {
                    xs
                } else {
                    kernels::im2col(xs, geom, &mut col);
                    &col
                };
                let gys = &gy.data()[i * o * cols..(i + 1) * o * cols];
                gemm(
                    o,
                    cols,
                    rows,
                    T::one(),
                    MatRef::row_major(gys, cols),
                    MatRef::transposed(src, cols),
                    T::one(),
                    MatMut::row_major(&mut gw_acc, rows),
                );
            }
            self.acc(grads, w, |g| axpy(g, &gw_acc, T::one()));
        }
        if need_x {
            self.acc(grads, x, |g| {
                for i in 0..batch {
                    let gys = &gy.data()[i * o * cols..(i + 1) * o * cols];
                    let gxs = &mut g[i * in_size..(i + 1) * in_size];
                    if geom.is_pointwise() {
                        gemm(
                            rows,
                            o,
                            cols,
                            T::one(),
                            MatRef::transposed(vw.data(), rows),
                            MatRef::row_major(gys, cols),
                            T::one(),
                            MatMut::row_major(gxs, cols),
                        );
                    } else {
                        gemm(
                            rows,
                            o,
                            cols,
                            T::one(),
                            MatRef::transposed(vw.data(), rows),
                            MatRef::row_major(gys, cols),
                            T::zero(),
                            MatMut::row_major(&mut col, cols),
                        );
                        kernels::col2im(&col, geom, gxs);
                    }
                }
            });
        }
    }

    /// Runs `f` on the (zero-initialized on first use) gradient buffer of `v`.
    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let g = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(g.data_mut());
    }
}

fn view<T>(data: &[T], rows: usize, cols: usize, transposed: bool) -> MatRef<'_, T> {
    if transposed {
        MatRef::transposed(data, rows)
    } else {
        MatRef::row_major(data, cols)
    }
}

fn view_mut<T>(data: &mut [T], rows: usize, cols: usize, transposed: bool) -> MatMut<'_, T> {
    if transposed {
        MatMut { data, rs: 1, cs: rows as isize }
    } else {
        MatMut::row_major(data, cols)
    }
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], x: &[T], a: T) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn row_norm<T: Scalar>(row: &[T]) -> T {
    row.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::of(1e-12))
}

pub(crate) fn softmax_into<T: Scalar>(x: &[T], out: &mut [T]) {
    let mx = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mx).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}
