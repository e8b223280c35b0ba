//! Parameter container on disk.
//!
//! Layout: the magic line `PICTOR-CKPT 1`, then one line of compact JSON (the
//! manifest: free-form metadata plus `name`, `shape` and byte `offset` per tensor),
//! then the concatenated tensor payloads as little-endian `f32`.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use super::NnError;

const MAGIC: &str = "PICTOR-CKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub version: u32,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// A decoded checkpoint: metadata plus named tensors in file order.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore<f32>, meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset });
            offset += 4 * t.len() as u64;
        }
        let manifest = Manifest { version: VERSION, meta: self.meta.clone(), tensors: entries };
        let mut out = format!("{MAGIC} {VERSION}\n").into_bytes();
        out.extend(serde_json::to_vec(&manifest).expect("manifest serializes"));
        out.push(b'\n');
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_reader(reader: impl Read) -> Result<Self, NnError> {
        let mut r = BufReader::new(reader);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let version = line
            .trim_end()
            .strip_prefix(MAGIC)
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| NnError::Checkpoint("missing checkpoint header".into()))?;
        if version != VERSION {
            return Err(NnError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        line.clear();
        r.read_line(&mut line)?;
        let manifest: Manifest =
            serde_json::from_str(line.trim_end()).map_err(|e| NnError::Checkpoint(format!("bad manifest: {e}")))?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let len: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * len;
            let bytes = payload
                .get(start..end)
                .ok_or_else(|| NnError::Checkpoint(format!("tensor `{}` truncated", e.name)))?;
            let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Self { meta: manifest.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    /// Copies every tensor into `store`. Names and shapes must match exactly in both directions.
    pub fn restore_into(&self, store: &mut ParamStore<f32>) -> Result<(), NnError> {
        if self.tensors.len() != store.len() {
            return Err(NnError::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, t) in &self.tensors {
            let id = store
                .id(name)
                .ok_or_else(|| NnError::Checkpoint(format!("unknown tensor `{name}`")))?;
            let p = store.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(NnError::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut ps = ParamStore::new();
        ps.add("a.weight", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-8, f32::MAX]).unwrap(), true)
            .unwrap();
        ps.add("a.running_var", Tensor::new(vec![1], vec![0.25]).unwrap(), false).unwrap();
        ps
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = Checkpoint::from_store(&store(), serde_json::json!({"k": 1}));
        let back = Checkpoint::from_reader(&ck.to_bytes()[..]).unwrap();
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.tensors, ck.tensors);
        let mut fresh = store();
        fresh.get_mut(fresh.id("a.weight").unwrap()).value.data_mut()[0] = 9.0;
        back.restore_into(&mut fresh).unwrap();
        assert_eq!(fresh.get(fresh.id("a.weight").unwrap()).value.data()[0], 1.0);
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut ck = Checkpoint::from_store(&store(), serde_json::Value::Null);
        ck.tensors[0].1 = Tensor::zeros(vec![3, 2]);
        let err = ck.restore_into(&mut store()).unwrap_err();
        assert!(err.to_string().contains("shape"));
    }

    #[test]
    fn rejects_unknown_name() {
        let mut ck = Checkpoint::from_store(&store(), serde_json::Value::Null);
        ck.tensors[1].0 = "b.running_var".into();
        assert!(ck.restore_into(&mut store()).is_err());
    }

    #[test]
    fn rejects_bad_header() {
        assert!(Checkpoint::from_reader(&b"NOPE 1\n{}\n"[..]).is_err());
    }
}
