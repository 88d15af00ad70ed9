//! Self-describing checkpoint container.
//!
//! Layout: the 8-byte magic `DAPTCKPT`, a little-endian `u64` header length,
//! a JSON header (configs, vocabulary reference, step count, task metadata
//! and the tensor table), then every tensor's elements row-major in
//! little-endian at the header's precision, in table order.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::params::{ParamGroup, ParamKind, ParamStore, Precision, Scalar};
use super::{AdapterConfig, EncoderConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DAPTCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: ParamGroup,
    kind: ParamKind,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    precision: Precision,
    encoder: EncoderConfig,
    adapter: Option<AdapterConfig>,
    vocab: String,
    step: u64,
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub encoder: EncoderConfig,
    pub adapter: Option<AdapterConfig>,
    /// Identifies the vocabulary the embeddings index into.
    pub vocab: String,
    pub step: u64,
    /// Task-specific layout (heads, label index, ...).
    pub metadata: serde_json::Value,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: FORMAT_VERSION,
            precision: T::PRECISION,
            encoder: self.encoder.clone(),
            adapter: self.adapter,
            vocab: self.vocab.clone(),
            step: self.step,
            metadata: self.metadata.clone(),
            tensors: self
                .params
                .iter()
                .map(|p| TensorEntry {
                    name: p.name.clone(),
                    group: p.group,
                    kind: p.kind,
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header.len() + self.params.num_elements() * T::BYTES);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in self.params.iter() {
            for &v in p.value.iter() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + header_len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {}", header.version)));
        }
        let width = match header.precision {
            Precision::F32 => 4,
            Precision::F64 => 8,
        };
        let mut offset = 16 + header_len;
        let mut params = ParamStore::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let data = bytes
                .get(offset..offset + n * width)
                .ok_or_else(|| bad(&format!("truncated data for {}", entry.name)))?;
            offset += n * width;
            let values: Vec<T> = data
                .chunks_exact(width)
                .map(|c| match header.precision {
                    Precision::F32 => T::lit(f64::from(f32::read_le(c))),
                    Precision::F64 => T::lit(f64::read_le(c)),
                })
                .collect();
            let value = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
                .map_err(|e| bad(&format!("{}: {e}", entry.name)))?;
            params.add(entry.name, entry.group, entry.kind, value);
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Checkpoint {
            encoder: header.encoder,
            adapter: header.adapter,
            vocab: header.vocab,
            step: header.step,
            metadata: header.metadata,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
