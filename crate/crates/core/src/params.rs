//! Named parameter storage shared by all networks.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_TAG: AtomicU64 = AtomicU64::new(1);

fn fresh_tag() -> u64 {
    NEXT_TAG.fetch_add(1, Ordering::Relaxed)
}

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

/// Ordered collection of named tensors. Trainable entries are optimized;
/// buffers (e.g. power-iteration vectors) are only persisted.
#[derive(Debug)]
pub struct ParamStore<T> {
    tag: u64,
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> Clone for ParamStore<T> {
    /// Clones get a fresh tag so gradients of the two stores never mix.
    fn clone(&self) -> Self {
        Self { tag: fresh_tag(), entries: self.entries.clone() }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { tag: fresh_tag(), entries: Vec::new() }
    }

    pub fn tag(&self) -> u64 {
        self.tag
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.push(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.push(name, value, false)
    }

    fn push(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> ParamId {
        debug_assert!(self.find(name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry { name: name.to_string(), value, trainable });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform `±1/sqrt(fan_in)` initialization, the usual default for
    /// linear and convolution layers.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / num_traits::Float::sqrt(fan_in.max(1) as f64);
        self.add(name, Tensor::uniform(shape, bound, rng))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.is_trainable(id))
    }

    /// Number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    /// Same parameters at another precision (fresh tag).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tag: fresh_tag(),
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), value: e.value.cast(), trainable: e.trainable })
                .collect(),
        }
    }

    /// Copies every entry of `other` whose name and shape match; returns
    /// the number of entries copied.
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> Result<usize> {
        let mut copied = 0;
        for e in &mut self.entries {
            if let Some(src) = other.entries.iter().find(|o| o.name == e.name) {
                if src.value.shape() != e.value.shape() {
                    return Err(Error::Config(alloc::format!(
                        "parameter {} has shape {:?}, source has {:?}",
                        e.name,
                        e.value.shape(),
                        src.value.shape()
                    )));
                }
                e.value = src.value.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }

    /// Binary encoding: magic, entry count, then per entry the name, the
    /// trainable flag, the shape and little-endian `f32` data.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, self.entries.len() as u32);
        for e in &self.entries {
            put_u32(&mut out, e.name.len() as u32);
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.trainable as u8);
            put_u32(&mut out, e.value.ndim() as u32);
            for &d in e.value.shape() {
                put_u32(&mut out, d as u32);
            }
            for &x in e.value.data() {
                out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Decode("bad parameter file magic".into()));
        }
        let n = r.u32()? as usize;
        let mut store = Self::new();
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = core::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Decode("parameter name is not utf-8".into()))?
                .to_string();
            let trainable = r.take(1)?[0] != 0;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let count: usize = shape.iter().product();
            let raw = r.take(count * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            store.push(&name, Tensor::from_vec(&shape, data)?, trainable);
        }
        if r.pos != bytes.len() {
            return Err(Error::Decode("trailing bytes after parameters".into()));
        }
        Ok(store)
    }
}

const MAGIC: &[u8] = b"FFGP\x01";

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Decode("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}
