//! Fréchet distance between feature Gaussians and retrieval R-precision.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{config_err, precondition_err, Error, Result};
use crate::linalg::{matmul_square, symmetric_apply, symmetric_eigen};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Eigenvalues below this are treated as zero.
pub const EIGEN_CLAMP: f64 = 1e-10;

/// Mean and unbiased covariance of a feature population.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`.
    pub cov: Vec<f64>,
    pub count: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn is_finite(&self) -> bool {
        self.mean.iter().chain(&self.cov).all(|v| v.is_finite())
    }
}

/// `features: [count, F]`.
pub fn gaussian_stats<T: Scalar>(features: &Tensor<T>) -> Result<GaussianStats> {
    if features.ndim() != 2 {
        return Err(config_err!("features must be [count, F], got {:?}", features.shape()));
    }
    let (count, f) = (features.dim(0), features.dim(1));
    if count < 2 {
        return Err(precondition_err!("need at least two feature vectors, got {count}"));
    }
    let x = features.to_f64_vec();
    let mut mean = vec![0.0; f];
    for row in x.chunks_exact(f) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut cov = vec![0.0; f * f];
    let mut centered = vec![0.0; f];
    for row in x.chunks_exact(f) {
        for ((c, v), m) in centered.iter_mut().zip(row).zip(&mean) {
            *c = v - m;
        }
        for i in 0..f {
            let ci = centered[i];
            for j in i..f {
                cov[i * f + j] += ci * centered[j];
            }
        }
    }
    let denom = (count - 1) as f64;
    for i in 0..f {
        for j in i..f {
            let v = cov[i * f + j] / denom;
            cov[i * f + j] = v;
            cov[j * f + i] = v;
        }
    }
    Ok(GaussianStats { mean, cov, count })
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, floored at zero.
///
/// The trace of the product square root is taken as the sum of square roots
/// of the eigenvalues of `S_a^(1/2) S_b S_a^(1/2)`, which is symmetric.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(config_err!("feature widths differ: {} vs {}", a.dim(), b.dim()));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::Numerical("non-finite Gaussian statistics".into()));
    }
    let n = a.dim();
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let trace = |m: &[f64]| (0..n).map(|i| m[i * n + i]).sum::<f64>();
    let clamp = |l: f64| if l < EIGEN_CLAMP { 0.0 } else { l };
    let sqrt_a = symmetric_apply(&symmetric_eigen(&a.cov, n), |l| Float::sqrt(clamp(l)));
    let inner = matmul_square(&matmul_square(&sqrt_a, &b.cov, n), &sqrt_a, n);
    let cross: f64 = symmetric_eigen(&inner, n).values.iter().map(|&l| Float::sqrt(clamp(l))).sum();
    let d = mean_term + trace(&a.cov) + trace(&b.cov) - 2.0 * cross;
    if !d.is_finite() {
        return Err(Error::Numerical("Fréchet distance is not finite".into()));
    }
    Ok(d.max(0.0))
}

/// A query with its matched and mismatched candidate features.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalPool {
    pub query: Vec<f64>,
    pub matched: Vec<Vec<f64>>,
    pub mismatched: Vec<Vec<f64>>,
}

impl RetrievalPool {
    pub fn size(&self) -> usize {
        self.matched.len() + self.mismatched.len()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = Float::sqrt(a.iter().map(|x| x * x).sum::<f64>());
    let nb = Float::sqrt(b.iter().map(|x| x * x).sum::<f64>());
    let denom = na * nb;
    if denom > 0.0 {
        dot / denom
    } else {
        0.0
    }
}

/// Whether every matched candidate ranks strictly inside the top `r`.
/// Mismatched candidates win ties.
pub fn retrieval_success(pool: &RetrievalPool, r: usize) -> bool {
    let mut ranked: Vec<(f64, bool)> = pool
        .matched
        .iter()
        .map(|m| (cosine(&pool.query, m), true))
        .chain(pool.mismatched.iter().map(|m| (cosine(&pool.query, m), false)))
        .collect();
    // descending score; at equal score mismatches first
    ranked.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap_or(core::cmp::Ordering::Equal).then(x.1.cmp(&y.1)));
    ranked.iter().take(r).all(|&(_, matched)| matched)
}

/// Fraction of pools whose `r` matched candidates occupy the top `r` ranks.
pub fn r_precision(pools: &[RetrievalPool], r: usize) -> Result<f64> {
    if pools.is_empty() {
        return Err(precondition_err!("no retrieval pools"));
    }
    if r == 0 {
        return Err(config_err!("R must be positive"));
    }
    let mut hits = 0usize;
    for p in pools {
        if p.matched.len() < r {
            return Err(config_err!("pool has {} matched candidates, R = {r}", p.matched.len()));
        }
        hits += retrieval_success(p, r) as usize;
    }
    Ok(hits as f64 / pools.len() as f64)
}
