//! Adam optimizer.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamStore, Reader};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    /// GAN convention: lr 2e-4, betas (0.5, 0.999).
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        Self { config, step: 0, m: vec![None; store.len()], v: vec![None; store.len()] }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter that has a gradient.
    pub fn step(&mut self, ps: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        assert_eq!(grads.len(), ps.len(), "gradient list does not match store");
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - libm_powi(c.beta1, self.step);
        let bc2 = 1.0 - libm_powi(c.beta2, self.step);
        let step_size = T::of(c.lr / bc1);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(c.eps);
        for id in ps.ids().collect::<Vec<_>>() {
            let Some(g) = &grads[id.index()] else { continue };
            if !ps.is_trainable(id) {
                continue;
            }
            let m = self.m[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = ps.get_mut(id);
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
    }

    /// Step counter followed by the first and second moments.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"FFGA\x01");
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.m.len() as u32).to_le_bytes());
        for slot in self.m.iter().chain(&self.v) {
            match slot {
                None => out.push(0),
                Some(t) => {
                    out.push(1);
                    out.extend_from_slice(&(t.numel() as u32).to_le_bytes());
                    for &x in t.data() {
                        out.extend_from_slice(&x.as_f64().to_le_bytes());
                    }
                }
            }
        }
        out
    }

    /// Restores moments saved by [`Adam::to_bytes`]; shapes come from `store`.
    pub fn from_bytes(config: AdamConfig, store: &ParamStore<T>, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(5)? != b"FFGA\x01" {
            return Err(Error::Decode("bad optimizer file magic".into()));
        }
        let step = r.u64()?;
        let n = r.u32()? as usize;
        if n != store.len() {
            return Err(Error::Decode("optimizer state does not match parameters".into()));
        }
        let mut slots = Vec::with_capacity(2 * n);
        for k in 0..2 * n {
            let present = r.take(1)?[0] != 0;
            if !present {
                slots.push(None);
                continue;
            }
            let count = r.u32()? as usize;
            let shape = store.get(crate::params::ParamId(k % n)).shape().to_vec();
            let raw = r.take(count * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| {
                    let mut a = [0u8; 8];
                    a.copy_from_slice(c);
                    T::of(f64::from_le_bytes(a))
                })
                .collect();
            slots.push(Some(Tensor::from_vec(&shape, data)?));
        }
        let v = slots.split_off(n);
        Ok(Self { config, step, m: slots, v })
    }
}

fn libm_powi(base: f64, exp: u64) -> f64 {
    num_traits::Float::powi(base, exp.min(i32::MAX as u64) as i32)
}
