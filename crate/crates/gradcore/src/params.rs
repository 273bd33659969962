//! Named parameter storage and the on-disk checkpoint container.
//!
//! Container layout: the 8-byte magic `NFSCKPT1`, a little-endian `u64`
//! manifest length, the JSON manifest, then every parameter's values as raw
//! little-endian `f64` in manifest order.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GradError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"NFSCKPT1";

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(GradError::contract(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let id = self.id(name)?;
        Some(self.get_mut(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Records every parameter on `tape` as a gradient-requiring leaf, in store order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.param(v.clone())).collect()
    }

    /// Records every parameter as a constant (no gradient tracking).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.constant(v.clone())).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in `f64` units from the start of the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub params: Vec<ManifestEntry>,
    /// Free-form configuration echo, stored verbatim.
    pub config: String,
    pub seed: u64,
}

/// Parameters plus the metadata stored alongside them.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub config: String,
    pub seed: u64,
}

impl Checkpoint {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut offset = 0;
        let params = self
            .params
            .iter()
            .map(|(name, t)| {
                let e = ManifestEntry { name: name.to_string(), shape: t.shape().to_vec(), offset };
                offset += t.len();
                e
            })
            .collect();
        let manifest = Manifest { params, config: self.config.clone(), seed: self.seed };
        let json = serde_json::to_vec(&manifest)
            .map_err(|e| GradError::Checkpoint(format!("manifest encode: {e}")))?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::with_capacity(offset * 8);
        for t in self.params.values() {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(GradError::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let manifest: Manifest = serde_json::from_slice(&json)
            .map_err(|e| GradError::Checkpoint(format!("manifest decode: {e}")))?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        let total: usize = manifest.params.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if rest.len() != total * 8 {
            return Err(GradError::Checkpoint(format!(
                "data section holds {} bytes, manifest needs {}",
                rest.len(),
                total * 8
            )));
        }
        let mut params = ParamStore::new();
        for e in &manifest.params {
            let n: usize = e.shape.iter().product();
            if e.offset + n > total {
                return Err(GradError::Checkpoint(format!("entry `{}` overruns data", e.name)));
            }
            let data = rest[e.offset * 8..(e.offset + n) * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(e.shape.clone(), data)
                .map_err(|err| GradError::Checkpoint(format!("entry `{}`: {err}", e.name)))?;
            params.add(e.name.clone(), t)?;
        }
        Ok(Self { params, config: manifest.config, seed: manifest.seed })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut p = ParamStore::new();
        p.add("a.w", Tensor::new([2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -3.5, 0.1]).unwrap())
            .unwrap();
        p.add("b", Tensor::scalar(std::f64::consts::PI)).unwrap();
        let ck = Checkpoint { params: p, config: "chan = 4\n".into(), seed: 7 };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.seed, 7);
        assert_eq!(back.config, "chan = 4\n");
        for ((n1, t1), (n2, t2)) in ck.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn rejects_truncated_file() {
        let mut p = ParamStore::new();
        p.add("w", Tensor::ones([4])).unwrap();
        let ck = Checkpoint { params: p, config: String::new(), seed: 0 };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Checkpoint::read_from(buf.as_slice()).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamStore::new();
        p.add("w", Tensor::ones([1])).unwrap();
        assert!(p.add("w", Tensor::ones([1])).is_err());
    }
}
