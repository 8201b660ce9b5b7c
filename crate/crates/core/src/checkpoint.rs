//! Checkpoint container shared by the estimator and the diffusion model.
//!
//! A checkpoint file is one JSON header line followed by a little-endian
//! `f32` blob. The header records a schema version, the kind of model, the
//! full config with its hash, free-form metadata, and the name, shape and
//! blob offset of every tensor.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use candle::{DType, Device, Tensor};
use candle_nn::VarMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHECKPOINT_SCHEMA: &str = "facelab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
    kind: String,
    config: serde_json::Value,
    config_hash: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

/// SHA-256 of a config's canonical JSON form.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    let value = serde_json::to_value(cfg)?;
    Ok(sha256_hex(serde_json::to_string(&value)?.as_bytes()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a file's bytes, as reported in model cards and eval reports.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

impl Checkpoint {
    pub fn new<C: Serialize>(kind: &str, config: &C) -> Result<Self> {
        Ok(Self {
            kind: kind.to_string(),
            config: serde_json::to_value(config)?,
            config_hash: config_hash(config)?,
            meta: serde_json::Value::Null,
            tensors: BTreeMap::new(),
        })
    }

    pub fn insert_tensor(&mut self, name: &str, t: &Tensor) -> Result<()> {
        let shape = t.dims().to_vec();
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        self.tensors.insert(name.to_string(), (shape, data));
        Ok(())
    }

    /// Stores every variable of `vars` under `prefix`.
    pub fn insert_varmap(&mut self, prefix: &str, vars: &VarMap) -> Result<()> {
        let data = vars.data().lock().expect("varmap lock");
        for (name, var) in data.iter() {
            self.insert_tensor(&format!("{prefix}{name}"), var.as_tensor())?;
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str, dtype: DType, device: &Device) -> Result<Tensor> {
        let (shape, data) = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` missing")))?;
        Ok(Tensor::from_slice(data, shape.as_slice(), device)?.to_dtype(dtype)?)
    }

    /// Overwrites every variable of `vars` from tensors stored under
    /// `prefix`. Missing names or shape mismatches are errors.
    pub fn load_varmap(&self, prefix: &str, vars: &VarMap) -> Result<()> {
        let data = vars.data().lock().expect("varmap lock");
        for (name, var) in data.iter() {
            let full = format!("{prefix}{name}");
            let t = self.tensor(&full, var.dtype(), var.device())?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{full}` has shape {:?}, model expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, (shape, data)) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
                len: data.len(),
            });
            offset += data.len();
        }
        let header = Header {
            schema: CHECKPOINT_SCHEMA.to_string(),
            version: CHECKPOINT_VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let mut bytes = serde_json::to_vec(&header)?;
        bytes.push(b'\n');
        bytes.reserve(offset * 4);
        for (_, data) in self.tensors.values() {
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        // write-then-rename so a crash never leaves a truncated checkpoint
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let mut line = Vec::new();
        reader.read_until(b'\n', &mut line).map_err(|e| Error::io(path, e))?;
        let header: Header = serde_json::from_slice(&line)
            .map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
        if header.schema != CHECKPOINT_SCHEMA || header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported schema {} v{}",
                path.display(),
                header.schema,
                header.version
            )));
        }
        let mut blob = Vec::new();
        reader.read_to_end(&mut blob).map_err(|e| Error::io(path, e))?;
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let start = e.offset * 4;
            let end = start + e.len * 4;
            if end > blob.len() || e.shape.iter().product::<usize>() != e.len {
                return Err(Error::Checkpoint(format!("{}: tensor `{}` is truncated", path.display(), e.name)));
            }
            let data = blob[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(e.name, (e.shape, data));
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            config_hash: header.config_hash,
            meta: header.meta,
            tensors,
        })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a `{kind}` checkpoint, found `{}`", self.kind)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let mut c = Checkpoint::new("test", &serde_json::json!({"a": 1})).unwrap();
        c.meta = serde_json::json!({"step": 3});
        let t = Tensor::arange(0f32, 6., &Device::Cpu).unwrap().reshape((2, 3)).unwrap();
        c.insert_tensor("w", &t).unwrap();
        c.insert_tensor("b", &Tensor::new(&[1.5f32], &Device::Cpu).unwrap()).unwrap();
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(file_hash(&path).unwrap().len(), 64);
    }

    #[test]
    fn config_hash_is_stable() {
        let a = config_hash(&serde_json::json!({"x": 1, "y": [1, 2]})).unwrap();
        let b = config_hash(&serde_json::json!({"x": 1, "y": [1, 2]})).unwrap();
        let c = config_hash(&serde_json::json!({"x": 2, "y": [1, 2]})).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
