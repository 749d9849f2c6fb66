//! Self-describing container of named tensors.
//!
//! Layout: the 8-byte magic `SQZCKPT1`, a little-endian `u64` header length,
//! a JSON header `{"meta": …, "tensors": [{name, shape, dtype, offset}]}`,
//! then each tensor's values as little-endian `f64` in header order.
//! `offset` counts bytes from the start of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use squeeze_tensor::Tensor;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"SQZCKPT1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: Value,
    pub tensors: ParamStore,
}

impl Checkpoint {
    pub fn new(meta: Value, tensors: ParamStore) -> Self {
        Checkpoint { meta, tensors }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in self.tensors.iter() {
            entries.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                offset,
            });
            offset += 8 * t.numel() as u64;
        }
        let header = serde_json::to_vec(&Header { meta: self.meta.clone(), tensors: entries })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.tensors.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize
            .checked_add(hlen)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..body])?;
        let payload = &bytes[body..];
        let mut tensors = ParamStore::new();
        let mut expected = 0usize;
        for e in header.tensors {
            if e.dtype != "f64" {
                return Err(Error::Format(format!("`{}` has unsupported dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            if start != expected || start + 8 * n > payload.len() {
                return Err(Error::Format(format!("`{}` payload out of bounds", e.name)));
            }
            let data = payload[start..start + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            expected = start + 8 * n;
            tensors.insert(e.name, Tensor::new(data, &e.shape)?);
        }
        if expected != payload.len() {
            return Err(Error::Format("trailing bytes after payload".into()));
        }
        Ok(Checkpoint { meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Checkpoint of a plain model: its config in the metadata, weights by name.
pub fn model_checkpoint(model: &TransformerModel) -> Result<Checkpoint> {
    let meta = serde_json::json!({
        "kind": "plain",
        "config": serde_json::to_value(&model.config)?,
    });
    Ok(Checkpoint::new(meta, model.params.clone()))
}

pub fn save_model(model: &TransformerModel, path: &Path) -> Result<()> {
    model_checkpoint(model)?.save(path)
}

pub fn load_model(path: &Path) -> Result<TransformerModel> {
    let ck = Checkpoint::load(path)?;
    let cfg = ck
        .meta
        .get("config")
        .ok_or_else(|| Error::Format(format!("{} has no model config", path.display())))?;
    let cfg: ModelConfig = serde_json::from_value(cfg.clone())?;
    TransformerModel::from_params(cfg, ck.tensors)
}
