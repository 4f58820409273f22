//! Single-file tensor archive.
//!
//! Layout: the 8-byte magic `CLEARCKP`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then the
//! tensor payload as contiguous little-endian `f32` values. The header holds
//! the archive kind, a config block, free-form metadata, and for each tensor
//! its name, shape and element offset into the payload.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{ClearError, Result};
use crate::nn::ParamStore;

const MAGIC: &[u8; 8] = b"CLEARCKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: Value,
    meta: BTreeMap<String, Value>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: Value,
    pub meta: BTreeMap<String, Value>,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new(kind: &str, config: Value) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            config,
            meta: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert_tensor(&mut self, name: &str, t: &Tensor) -> Result<()> {
        let values = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        self.tensors.insert(name.to_string(), (t.dims().to_vec(), values));
        Ok(())
    }

    /// Adds every parameter of `store`, names prefixed by `prefix`.
    pub fn insert_store(&mut self, prefix: &str, store: &ParamStore) -> Result<()> {
        for (name, var) in store.vars() {
            self.insert_tensor(&format!("{prefix}{name}"), var.as_tensor())?;
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str, dtype: DType) -> Result<Tensor> {
        let (shape, values) = self
            .tensors
            .get(name)
            .ok_or_else(|| ClearError::Checkpoint(format!("missing tensor {name}")))?;
        Ok(Tensor::from_slice(values, shape.as_slice(), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Loads `prefix`-named tensors into `store`. Every store parameter must
    /// be present with the same shape.
    pub fn load_into(&self, prefix: &str, store: &ParamStore) -> Result<()> {
        for (name, var) in store.vars() {
            let key = format!("{prefix}{name}");
            let (shape, _) = self
                .tensors
                .get(&key)
                .ok_or_else(|| ClearError::Checkpoint(format!("missing tensor {key}")))?;
            if shape.as_slice() != var.dims() {
                return Err(ClearError::Checkpoint(format!(
                    "{key}: checkpoint shape {shape:?} does not match {:?}",
                    var.dims()
                )));
            }
            var.set(&self.tensor(&key, store.dtype())?)?;
        }
        Ok(())
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.meta.get(key).and_then(Value::as_str)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut offset = 0;
        for (name, (shape, values)) in &self.tensors {
            entries.push(TensorEntry { name: name.clone(), shape: shape.clone(), offset });
            offset += values.len();
        }
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, values) in self.tensors.values() {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| ClearError::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint archive"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(ClearError::Checkpoint(format!("unsupported archive version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize.checked_add(hlen).ok_or_else(|| bad("header length overflow"))?;
        if header_end > bytes.len() {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[20..header_end])?;
        let payload = &bytes[header_end..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset * 4;
            let end = start + n * 4;
            if end > payload.len() {
                return Err(ClearError::Checkpoint(format!("tensor {} runs past the payload", e.name)));
            }
            let values = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(e.name, (e.shape, values));
        }
        Ok(Checkpoint { kind: header.kind, config: header.config, meta: header.meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| ClearError::io(path, e))?;
        f.write_all(&bytes).map_err(|e| ClearError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| ClearError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(ClearError::Checkpoint(format!(
                "expected a {kind} archive, found {}",
                self.kind
            )));
        }
        Ok(())
    }
}
