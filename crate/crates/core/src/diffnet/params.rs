use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{DiffTensor, Tensor};
use crate::error::{Error, Result};

pub type ParamId = usize;

const MAGIC: &[u8; 4] = b"DFN1";

/// Named parameters in insertion order. Buffers (e.g. batch-norm running
/// statistics) live here too but are skipped by the optimizer.
#[derive(Clone, Debug)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<DiffTensor>,
    trainable: Vec<bool>,
    index: HashMap<String, ParamId>,
    rng: ChaCha8Rng,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            trainable: Vec::new(),
            index: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Invariant(format!("duplicate parameter name {name}")));
        }
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(DiffTensor::new(value));
        self.trainable.push(trainable);
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Weight drawn uniformly from `±sqrt(1 / fan_in)`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        self.insert(name, Tensor::new(shape.to_vec(), vec![value; n])?, true)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        self.insert(name, Tensor::new(shape.to_vec(), vec![value; n])?, false)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.tensors[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.tensors[id].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tensors[id].grad
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id]
    }

    pub fn ids(&self) -> std::ops::Range<ParamId> {
        0..self.tensors.len()
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&i| self.trainable[i])
    }

    pub fn num_trainable_values(&self) -> usize {
        self.trainable_ids().map(|i| self.tensors[i].value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.grad.iter().all(|g| g.is_finite()))
    }

    /// Concatenated values of `ids`, in order.
    pub fn flat_values(&self, ids: &[ParamId]) -> Vec<f64> {
        ids.iter().flat_map(|&i| self.tensors[i].value.data.iter().copied()).collect()
    }

    /// Concatenated gradients of `ids`, in order.
    pub fn flat_grads(&self, ids: &[ParamId]) -> Vec<f64> {
        ids.iter().flat_map(|&i| self.tensors[i].grad.iter().copied()).collect()
    }

    /// Inverse of [`ParamStore::flat_values`].
    pub fn set_flat_values(&mut self, ids: &[ParamId], values: &[f64]) {
        let mut off = 0;
        for &i in ids {
            let d = &mut self.tensors[i].value.data;
            let n = d.len();
            d.copy_from_slice(&values[off..off + n]);
            off += n;
        }
        assert_eq!(off, values.len(), "flat value length");
    }

    /// Serializes all parameters and buffers: `DFN1`, then per record
    /// `u32 name_len, name, u32 rank, u32 dims[rank], f64 payload`, little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        for (name, t) in self.names.iter().zip(&self.tensors) {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.value.shape.len() as u32).to_le_bytes());
            for &d in &t.value.shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.value.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    /// Parses a checkpoint into `(name, tensor)` records.
    pub fn parse_bytes(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("checkpoint: missing DFN1 magic".into()));
        }
        let mut cur = Cursor { bytes, pos: 4 };
        let mut out = Vec::new();
        while cur.pos < bytes.len() {
            let name_len = cur.u32()?;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("checkpoint: name not utf-8".into()))?;
            let rank = cur.u32()?;
            let shape = (0..rank).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = cur
                .take(8 * n)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            out.push((name, Tensor::new(shape, data)?));
        }
        Ok(out)
    }

    /// Overwrites values from a checkpoint; every stored name must match a
    /// parameter of identical shape and every parameter must be present.
    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let records = Self::parse_bytes(bytes)?;
        if records.len() != self.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} records, model expects {}",
                records.len(),
                self.len()
            )));
        }
        for (name, t) in records {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint: unknown parameter {name}")))?;
            if self.tensors[id].value.shape != t.shape {
                return Err(Error::Format(format!(
                    "checkpoint: {name} has shape {:?}, model expects {:?}",
                    t.shape, self.tensors[id].value.shape
                )));
            }
            self.tensors[id].value = t;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.load_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format("checkpoint: truncated record".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut p = ParamStore::new(3);
        p.uniform("enc.w", &[2, 3], 2).unwrap();
        p.constant("ln.gain", &[3], 1.0).unwrap();
        p.buffer("bn.running_var", &[4], 1.0).unwrap();
        p
    }

    #[test]
    fn init_bounds_and_determinism() {
        let a = store();
        let b = store();
        assert_eq!(a.value(0), b.value(0));
        let bound = (0.5f64).sqrt();
        assert!(a.value(0).data.iter().all(|v| v.abs() <= bound));
        assert_eq!(a.trainable_ids().collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = store();
        assert!(p.constant("ln.gain", &[1], 0.0).is_err());
    }

    #[test]
    fn checkpoint_layout_and_round_trip() {
        let a = store();
        let bytes = a.to_bytes();
        assert_eq!(&bytes[..4], b"DFN1");
        assert_eq!(&bytes[4..8], &5u32.to_le_bytes());
        assert_eq!(&bytes[8..13], b"enc.w");
        assert_eq!(&bytes[13..17], &2u32.to_le_bytes());
        let mut b = ParamStore::new(99);
        b.uniform("enc.w", &[2, 3], 2).unwrap();
        b.constant("ln.gain", &[3], 0.0).unwrap();
        b.buffer("bn.running_var", &[4], 0.0).unwrap();
        b.load_bytes(&bytes).unwrap();
        for id in a.ids() {
            assert_eq!(a.value(id), b.value(id));
        }
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let a = store();
        let bytes = a.to_bytes();
        let mut b = store();
        assert!(b.load_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(b.load_bytes(b"XXXX").is_err());
        let mut c = ParamStore::new(0);
        c.uniform("enc.w", &[3, 2], 2).unwrap();
        c.constant("ln.gain", &[3], 1.0).unwrap();
        c.buffer("bn.running_var", &[4], 1.0).unwrap();
        assert!(c.load_bytes(&bytes).is_err());
    }
}
