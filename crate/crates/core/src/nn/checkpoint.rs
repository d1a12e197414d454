//! Checkpoint archives: a JSON header (format version, free-form model
//! configuration and the parameter table) followed by the parameter values
//! as packed little-endian `f32`.
//!
//! Layout: `"EVCK"`, u32 version, u64 header length, header JSON, values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: serde_json::Value,
    params: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: serde_json::Value,
    pub params: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    /// Snapshot of every parameter under any of `prefixes` (empty = all).
    pub fn from_store<T: Scalar>(store: &ParamStore<T>, prefixes: &[&str], config: serde_json::Value) -> Self {
        let mask = if prefixes.is_empty() {
            store.mask_for(&[""])
        } else {
            store.mask_for(prefixes)
        };
        let params = store
            .ids()
            .filter(|&id| mask.contains(id))
            .map(|id| (store.name(id).to_string(), store.get(id).cast::<f32>()))
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            config,
            params,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: self.version,
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(n, t)| Entry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let n: usize = self.params.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 4 * n);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.params {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::CorruptCheckpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..).ok_or_else(|| corrupt("truncated"))?;
        let json = body.get(..hlen).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        let mut values = &body[hlen..];
        let mut params = Vec::with_capacity(header.params.len());
        for e in header.params {
            let n: usize = e.shape.iter().product();
            if values.len() < 4 * n {
                return Err(Error::CorruptCheckpoint(format!("values of {} truncated", e.name)));
            }
            let data = values[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            values = &values[4 * n..];
            params.push((e.name, Tensor::from_vec(&e.shape, data)));
        }
        if !values.is_empty() {
            return Err(corrupt("trailing bytes after parameter values"));
        }
        Ok(Self {
            version,
            config: header.config,
            params,
        })
    }

    /// Copies every stored parameter into the same-named slot of `store`.
    /// Names absent from `store` or shape mismatches are errors.
    pub fn apply_to<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (name, t) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("unknown parameter {name}")))?;
            if store.get(id).shape() != t.shape() {
                return Err(Error::CorruptCheckpoint(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = t.cast();
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    write_atomic(path, &checkpoint.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingCheckpoint(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Hourglass, HourglassConfig};

    #[test]
    fn round_trip_restores_parameters_exactly() {
        let mut a = ParamStore::<f32>::new();
        Hourglass::build(&mut a, "x", HourglassConfig::new(3, 2, 2, 4), 1).unwrap();
        Hourglass::build(&mut a, "y", HourglassConfig::new(3, 2, 2, 4), 2).unwrap();
        let ck = Checkpoint::from_store(&a, &["x"], serde_json::json!({"levels": 2}));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        let mut b = ParamStore::<f32>::new();
        Hourglass::build(&mut b, "x", HourglassConfig::new(3, 2, 2, 4), 9).unwrap();
        Hourglass::build(&mut b, "y", HourglassConfig::new(3, 2, 2, 4), 2).unwrap();
        assert_ne!(a.hash_prefix("x"), b.hash_prefix("x"));
        back.apply_to(&mut b).unwrap();
        assert_eq!(a.hash_prefix(""), b.hash_prefix(""));
    }

    #[test]
    fn errors_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_checkpoint(&dir.path().join("none.ckpt")),
            Err(Error::MissingCheckpoint(_))
        ));
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::zeros(&[2, 3])).unwrap();
        let bytes = Checkpoint::from_store(&s, &[], serde_json::Value::Null).to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::CorruptCheckpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::CorruptCheckpoint(_))));
        let mut other = ParamStore::<f32>::new();
        other.insert("w", Tensor::zeros(&[3, 2])).unwrap();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(matches!(ck.apply_to(&mut other), Err(Error::CorruptCheckpoint(_))));
    }
}
