//! Spectral normalization by power iteration.

use alloc::vec::Vec;

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Smallest singular-value estimate used as a divisor.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Power-iteration state for one weight viewed as an `[out, rest]` matrix.
/// `u` approximates the leading left singular vector, `v` the right one.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState<T> {
    pub u: Tensor<T>,
    pub v: Tensor<T>,
    pub iterations: u64,
}

pub(crate) fn random_unit<T: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor<T> {
    let mut t = Tensor::<T>::randn(&[n], rng);
    normalize(t.data_mut());
    t
}

fn normalize<T: Scalar>(x: &mut [T]) -> T {
    let norm = x.iter().map(|&v| v * v).sum::<T>().sqrt();
    if norm > T::zero() {
        x.iter_mut().for_each(|v| *v /= norm);
    }
    norm
}

impl<T: Scalar> SpectralState<T> {
    pub fn new<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        Self { u: random_unit(rows, rng), v: random_unit(cols, rng), iterations: 0 }
    }

    pub(crate) fn from_vectors(u: Tensor<T>, v: Tensor<T>) -> Self {
        Self { u, v, iterations: 0 }
    }

    /// `v <- normalize(W^T u)`, `u <- normalize(W v)`. A zero weight leaves
    /// the vectors untouched.
    pub fn power_iterate(&mut self, weight: &Tensor<T>) {
        let rows = self.u.numel();
        let cols = self.v.numel();
        assert_eq!(weight.numel(), rows * cols, "weight does not match spectral state");
        let w = weight.data();
        let mut v: Vec<T> = (0..cols)
            .map(|c| (0..rows).map(|r| w[r * cols + c] * self.u.data()[r]).sum())
            .collect();
        if normalize(&mut v) == T::zero() {
            self.iterations += 1;
            return;
        }
        let mut u: Vec<T> = (0..rows)
            .map(|r| w[r * cols..(r + 1) * cols].iter().zip(&v).map(|(&a, &b)| a * b).sum())
            .collect();
        if normalize(&mut u) == T::zero() {
            self.iterations += 1;
            return;
        }
        self.u.data_mut().copy_from_slice(&u);
        self.v.data_mut().copy_from_slice(&v);
        self.iterations += 1;
    }

    /// Current estimate `u^T W v`, floored at [`SIGMA_FLOOR`].
    pub fn sigma(&self, weight: &Tensor<T>) -> T {
        let cols = self.v.numel();
        let w = weight.data();
        let s: T = self
            .u
            .data()
            .iter()
            .enumerate()
            .map(|(r, &ur)| ur * w[r * cols..(r + 1) * cols].iter().zip(self.v.data()).map(|(&a, &b)| a * b).sum::<T>())
            .sum();
        s.max(T::of(SIGMA_FLOOR))
    }
}

/// One power-iteration step on `state`, then `weight / sigma`.
pub fn spectral_normalize<T: Scalar>(weight: &Tensor<T>, state: &mut SpectralState<T>) -> Tensor<T> {
    state.power_iterate(weight);
    let sigma = state.sigma(weight);
    weight.map(|x| x / sigma)
}
