//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic b"MMTLCKPT"
//! 8       4     u32 format_version
//! 12      8     u64 header length N
//! 20      N     UTF-8 JSON header:
//!               {"format_version", "config", "pruned_heads", "tensors": [{"name", "shape"}]}
//! 20+N    ...   tensor payloads in header order, each numel × f64 (IEEE-754 LE)
//! ```
//!
//! The file must end exactly after the last payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, PrunedHeads};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MMTLCKPT";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub pruned_heads: PrunedHeads,
    pub weights: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    pruned_heads: PrunedHeads,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: self.format_version,
            config: self.config.clone(),
            pruned_heads: self.pruned_heads.clone(),
            tensors: self
                .weights
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = self.weights.values().map(|t| t.numel() * 8).sum();
        let mut out = Vec::with_capacity(20 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.weights.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let short = || Error::Format("checkpoint is truncated".into());
        if bytes.len() < 20 {
            return Err(short());
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize.checked_add(header_len).ok_or_else(short)?;
        let header_bytes = bytes.get(20..header_end).ok_or_else(short)?;
        let header: Header = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
        if header.format_version != version {
            return Err(Error::Format("header and preamble versions disagree".into()));
        }

        let mut offset = header_end;
        let mut weights = BTreeMap::new();
        for entry in header.tensors {
            let numel: usize = entry.shape.iter().product();
            let end = offset.checked_add(numel * 8).ok_or_else(short)?;
            let raw = bytes.get(offset..end).ok_or_else(short)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(entry.shape, data).map_err(|e| Error::Format(e.to_string()))?;
            if weights.insert(entry.name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate tensor {}", entry.name)));
            }
            offset = end;
        }
        if offset != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - offset
            )));
        }
        Ok(Checkpoint {
            format_version: version,
            config: header.config,
            pruned_heads: header.pruned_heads,
            weights,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
