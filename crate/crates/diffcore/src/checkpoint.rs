//! Binary checkpoint container.
//!
//! Layout:
//!
//! ```text
//! magic    8 bytes  "DIFFCKPT"
//! version  u32 LE   (1)
//! hlen     u64 LE   length of the JSON header
//! header   hlen bytes of UTF-8 JSON (see `Header`)
//! payload  f64 LE values; each header entry points at `offset..offset+len`
//! ```
//!
//! The header names every tensor with its kind (`param`, `buffer`, `adam_m`,
//! `adam_v`) and shape, and carries run metadata plus optional optimizer
//! scalars.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DiffError, Result};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DIFFCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub epoch: usize,
    pub config_hash: String,
    /// Free-form payload owned by the caller (model configuration etc).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    kind: EntryKind,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    learning_rate: f64,
    step: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    metadata: RunMetadata,
    entries: Vec<Entry>,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub kind: EntryKind,
    pub tensor: Tensor,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub metadata: RunMetadata,
    pub tensors: Vec<NamedTensor>,
    optimizer: Option<OptimizerHeader>,
}

impl Checkpoint {
    pub fn capture(store: &ParamStore, optimizer: Option<&Adam>, metadata: RunMetadata) -> Self {
        let mut tensors = Vec::new();
        for p in store.params() {
            tensors.push(NamedTensor { name: p.name.clone(), kind: EntryKind::Param, tensor: p.value.clone() });
        }
        for b in store.buffers() {
            tensors.push(NamedTensor { name: b.name.clone(), kind: EntryKind::Buffer, tensor: b.value.clone() });
        }
        let optimizer = optimizer.map(|adam| {
            let (m, v) = adam.moments();
            for (p, (m, v)) in store.params().iter().zip(m.iter().zip(v)) {
                tensors.push(NamedTensor { name: p.name.clone(), kind: EntryKind::AdamM, tensor: m.clone() });
                tensors.push(NamedTensor { name: p.name.clone(), kind: EntryKind::AdamV, tensor: v.clone() });
            }
            OptimizerHeader { config: *adam.config(), learning_rate: adam.learning_rate(), step: adam.steps() }
        });
        Self { metadata, tensors, optimizer }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for t in &self.tensors {
            entries.push(Entry { name: t.name.clone(), kind: t.kind, shape: t.tensor.shape().to_vec(), offset });
            offset += t.tensor.len();
        }
        let header = Header { metadata: self.metadata.clone(), entries, optimizer: self.optimizer.clone() };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| DiffError::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(DiffError::Checkpoint(format!("unsupported version {}", version)));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_end =
            20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])
            .map_err(|e| DiffError::Checkpoint(format!("header: {}", e)))?;
        let payload = &bytes[header_end..];
        let mut tensors = Vec::with_capacity(header.entries.len());
        for e in header.entries {
            let len: usize = e.shape.iter().product();
            let start = e.offset * 8;
            let end = start + len * 8;
            if end > payload.len() {
                return Err(DiffError::Checkpoint(format!("payload for `{}` is truncated", e.name)));
            }
            let data = payload[start..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(NamedTensor { name: e.name, kind: e.kind, tensor: Tensor::new(e.shape, data)? });
        }
        Ok(Self { metadata: header.metadata, tensors, optimizer: header.optimizer })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copies every parameter and buffer into `store`. The checkpoint must
    /// contain exactly the store's names with matching shapes.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        let mut seen = 0;
        for t in &self.tensors {
            if matches!(t.kind, EntryKind::Param | EntryKind::Buffer) {
                store.assign(&t.name, t.tensor.clone())?;
                seen += 1;
            }
        }
        let expected = store.params().len() + store.buffers().len();
        if seen != expected {
            return Err(DiffError::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                seen, expected
            )));
        }
        Ok(())
    }

    /// Rebuilds the optimizer state for `store`, if one was saved.
    pub fn restore_optimizer(&self, store: &ParamStore) -> Result<Option<Adam>> {
        let Some(opt) = &self.optimizer else { return Ok(None) };
        let find = |name: &str, kind: EntryKind| {
            self.tensors
                .iter()
                .find(|t| t.kind == kind && t.name == name)
                .map(|t| t.tensor.clone())
                .ok_or_else(|| DiffError::Checkpoint(format!("missing optimizer moment for `{}`", name)))
        };
        let mut first = Vec::new();
        let mut second = Vec::new();
        for p in store.params() {
            first.push(find(&p.name, EntryKind::AdamM)?);
            second.push(find(&p.name, EntryKind::AdamV)?);
        }
        Ok(Some(Adam::from_parts(opt.config, opt.learning_rate, opt.step, first, second)))
    }
}
