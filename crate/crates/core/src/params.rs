//! Named parameter collections, content digests and the checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic "HDCK" | version u8 | dtype u8 (4 = f32, 8 = f64)
//! descriptor_len u32 | descriptor (UTF-8 JSON)
//! entry_count u32
//! per entry: name_len u16 | name | ndim u8 | dims u32 * ndim | values
//! digest 32 bytes (SHA-256 of the entries, see ParamStore::digest)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{derive_rng, streams};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HDCK";
pub const CHECKPOINT_VERSION: u8 = 1;

/// An ordered `name -> tensor` map. Iteration order is insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        assert!(
            !self.entries.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.entries.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.values()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.values_mut()
    }

    pub fn tensor_at(&self, i: usize) -> &Tensor<T> {
        &self.entries[i]
    }

    pub fn tensor_at_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i]
    }

    pub fn name_at(&self, i: usize) -> &str {
        self.entries.get_index(i).map(|(k, _)| k.as_str()).expect("index")
    }

    /// Total number of scalar values.
    pub fn num_elements(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Copy of the store in another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and little-endian values, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(self.digest_bytes())
    }

    fn digest_bytes(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update([T::BYTES]);
        let mut buf = Vec::new();
        for (name, t) in &self.entries {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.shape().len() as u64).to_le_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            buf.clear();
            for v in t.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        h.finalize().into()
    }

    /// Serializes the store with an architecture descriptor.
    pub fn to_checkpoint_bytes(&self, descriptor: &serde_json::Value) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.push(T::BYTES);
        let desc = serde_json::to_vec(descriptor).expect("descriptor serializes");
        out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
        out.extend_from_slice(&desc);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for d in t.shape() {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in t.data() {
                v.write_le(&mut out);
            }
        }
        out.extend_from_slice(&self.digest_bytes());
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<(Self, serde_json::Value)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u8()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let dtype = r.u8()?;
        if dtype != T::BYTES {
            return Err(Error::Checkpoint(format!(
                "dtype width {dtype}, expected {}",
                T::BYTES
            )));
        }
        let dlen = r.u32()? as usize;
        let descriptor: serde_json::Value = serde_json::from_slice(r.take(dlen)?)?;
        let n = r.u32()? as usize;
        let mut store = Self::new();
        for _ in 0..n {
            let nlen = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|e| Error::Checkpoint(format!("entry name: {e}")))?
                .to_string();
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let count: usize = shape.iter().product();
            let raw = r.take(count * T::BYTES as usize)?;
            let data = raw.chunks_exact(T::BYTES as usize).map(T::read_le).collect();
            if store.entries.contains_key(&name) {
                return Err(Error::Checkpoint(format!("duplicate entry {name}")));
            }
            store.insert(name, Tensor::from_vec(&shape, data));
        }
        let digest = r.take(32)?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        if digest != store.digest_bytes() {
            return Err(Error::Checkpoint("digest mismatch".into()));
        }
        Ok((store, descriptor))
    }

    pub fn save(&self, path: &Path, descriptor: &serde_json::Value) -> Result<()> {
        let bytes = self.to_checkpoint_bytes(descriptor);
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        Self::from_checkpoint_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }
}

/// Shape and initialization rule of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`, the He rule for conv weights.
    HeUniform,
    /// Uniform in `±1 / sqrt(fan_in)`; `fan_in` taken from the weight this
    /// bias belongs to.
    BiasUniform(usize),
    Const(f64),
}

impl ParamSpec {
    pub fn weight(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init: Init::HeUniform,
        }
    }

    pub fn bias(name: impl Into<String>, len: usize, fan_in: usize) -> Self {
        Self {
            name: name.into(),
            shape: vec![len],
            init: Init::BiasUniform(fan_in),
        }
    }

    pub fn constant(name: impl Into<String>, len: usize, v: f64) -> Self {
        Self {
            name: name.into(),
            shape: vec![len],
            init: Init::Const(v),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Builds a store from layer specs; entry `i` draws from its own stream.
pub fn init_params<T: Real>(specs: &[ParamSpec], seed: u64) -> ParamStore<T> {
    let mut store = ParamStore::new();
    for (i, spec) in specs.iter().enumerate() {
        let mut rng = derive_rng(seed, streams::INIT_BASE + i as u64);
        let n = spec.numel();
        let data: Vec<T> = match spec.init {
            Init::HeUniform => {
                let fan_in: usize = spec.shape[1..].iter().product();
                let a = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| T::of(rng.random_range(-a..a))).collect()
            }
            Init::BiasUniform(fan_in) => {
                let a = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| T::of(rng.random_range(-a..a))).collect()
            }
            Init::Const(v) => vec![T::of(v); n],
        };
        store.insert(spec.name.clone(), Tensor::from_vec(&spec.shape, data));
    }
    store
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_store() -> ParamStore<f32> {
        let specs = vec![
            ParamSpec::weight("a.w", &[2, 1, 3, 3]),
            ParamSpec::bias("a.b", 2, 9),
            ParamSpec::constant("n.g", 2, 1.0),
        ];
        init_params(&specs, 11)
    }

    #[test]
    fn checkpoint_round_trip_preserves_digest() {
        let s = sample_store();
        let desc = serde_json::json!({"kind": "test", "width": 2});
        let bytes = s.to_checkpoint_bytes(&desc);
        let (back, d) = ParamStore::<f32>::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.digest(), s.digest());
        assert_eq!(d, desc);
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let s = sample_store();
        let mut bytes = s.to_checkpoint_bytes(&serde_json::json!({}));
        let n = bytes.len();
        bytes[n - 40] ^= 1;
        assert!(ParamStore::<f32>::from_checkpoint_bytes(&bytes).is_err());
        assert!(ParamStore::<f32>::from_checkpoint_bytes(&bytes[..10]).is_err());
        let good = s.to_checkpoint_bytes(&serde_json::json!({}));
        assert!(ParamStore::<f64>::from_checkpoint_bytes(&good).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let s = sample_store();
        s.save(&path, &serde_json::json!({"k": 1})).unwrap();
        let (back, _) = ParamStore::<f32>::load(&path).unwrap();
        assert_eq!(back.digest(), s.digest());
    }

    #[test]
    fn init_is_deterministic_and_streamed() {
        assert_eq!(sample_store(), sample_store());
        let other = init_params::<f32>(
            &[
                ParamSpec::weight("a.w", &[2, 1, 3, 3]),
                ParamSpec::bias("a.b", 2, 9),
                ParamSpec::constant("n.g", 2, 1.0),
            ],
            12,
        );
        assert_ne!(other.digest(), sample_store().digest());
    }

    proptest! {
        #[test]
        fn digest_changes_on_any_single_perturbation(idx in 0usize..22, up in any::<bool>()) {
            let s = sample_store();
            let mut p = s.clone();
            let mut seen = 0;
            for t in p.tensors_mut() {
                if idx < seen + t.len() {
                    let v = &mut t.data_mut()[idx - seen];
                    let eps = v.abs().max(1.0) * f32::EPSILON;
                    *v = if up { *v + eps } else { *v - eps };
                    break;
                }
                seen += t.len();
            }
            prop_assert_ne!(p.digest(), s.digest());
            let bytes = p.to_checkpoint_bytes(&serde_json::json!({}));
            let (back, _) = ParamStore::<f32>::from_checkpoint_bytes(&bytes).unwrap();
            prop_assert_eq!(back.digest(), p.digest());
        }
    }
}
