use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

const MAGIC: &[u8; 8] = b"VAACKPT1";

/// Named tensors plus free-form JSON metadata.
///
/// On disk: the 8-byte magic `VAACKPT1`, a little-endian `u64` header
/// length, a UTF-8 JSON index, then every tensor as little-endian `f64`
/// values in index order. Round trips are bit-exact.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Index {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in values.
    offset: usize,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Index {
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f64).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Input(format!("malformed checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let index: Index = serde_json::from_slice(header)?;
        let payload = &bytes[16 + hlen..];
        let mut tensors = BTreeMap::new();
        for e in index.tensors {
            let n: usize = e.shape.iter().product();
            let raw = payload
                .get(e.offset * 8..(e.offset + n) * 8)
                .ok_or_else(|| bad(&format!("payload of {} out of bounds", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Real)
                .collect();
            tensors.insert(e.name, Tensor::new(&e.shape, data)?);
        }
        Ok(Self {
            meta: index.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?
            .read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in proptest::collection::vec(any::<f64>(), 1..40), split in 0usize..40) {
            let split = split.min(values.len());
            let mut ck = Checkpoint::new(serde_json::json!({"kind": "test"}));
            let a: Vec<Real> = values[..split].iter().map(|v| *v as Real).collect();
            let b: Vec<Real> = values[split..].iter().map(|v| *v as Real).collect();
            ck.insert("visual/stem/w", Tensor::new(&[a.len()], a).unwrap());
            ck.insert("head/b", Tensor::new(&[1, b.len()], b).unwrap());
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back.meta, ck.meta.clone());
            for (k, t) in &ck.tensors {
                let u = &back.tensors[k];
                prop_assert_eq!(t.shape(), u.shape());
                for (x, y) in t.data().iter().zip(u.data()) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"not a checkpoint at all").is_err());
    }
}
