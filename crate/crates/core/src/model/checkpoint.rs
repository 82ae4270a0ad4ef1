//! Binary checkpoint format.
//!
//! ```text
//! "DGAC" | version: u32 LE | header_len: u64 LE | header JSON | payload
//! ```
//!
//! The header is `{config, tensors: [{name, shape, dtype: "f32", offset}]}`
//! where `offset` is the byte offset of the tensor inside the payload. The
//! payload is every tensor's data as contiguous little-endian f32.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::ModelConfig;
use super::encoder::EncoderModel;
use crate::autodiff::Tensor;

pub const MAGIC: &[u8; 4] = b"DGAC";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {0:?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt header: {0}")]
    Header(String),
    #[error("tensor {name}: shape {found:?} does not match config ({expected:?})")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("payload length {found} bytes, header requires {expected}")]
    PayloadLength { expected: usize, found: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &EncoderModel) -> Vec<u8> {
    let mut tensors = Vec::with_capacity(model.params().len());
    let mut offset = 0;
    for (name, t) in model.names().iter().zip(model.params()) {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
        });
        offset += t.numel() * 4;
    }
    let header = Header {
        config: model.config().clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.params() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<EncoderModel, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic(bytes[..bytes.len().min(4)].to_vec()));
    }
    if bytes.len() < 16 {
        return Err(CheckpointError::Header("file shorter than fixed prefix".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| CheckpointError::Header(format!("header length {header_len} exceeds file")))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    header
        .config
        .validate()
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let payload = &bytes[header_end..];

    let specs = EncoderModel::parameter_shapes(&header.config);
    if specs.len() != header.tensors.len() {
        return Err(CheckpointError::Header(format!(
            "expected {} tensors, header lists {}",
            specs.len(),
            header.tensors.len()
        )));
    }
    let expected_len: usize = specs.iter().map(|(_, s)| s.iter().product::<usize>() * 4).sum();
    if payload.len() != expected_len {
        return Err(CheckpointError::PayloadLength {
            expected: expected_len,
            found: payload.len(),
        });
    }
    let mut named = Vec::with_capacity(header.tensors.len());
    for (entry, (want_name, want_shape)) in header.tensors.iter().zip(&specs) {
        if &entry.name != want_name {
            return Err(CheckpointError::Header(format!(
                "tensor {} found where {want_name} expected",
                entry.name
            )));
        }
        if entry.dtype != "f32" {
            return Err(CheckpointError::Header(format!("unsupported dtype {}", entry.dtype)));
        }
        if &entry.shape != want_shape {
            return Err(CheckpointError::ShapeMismatch {
                name: entry.name.clone(),
                expected: want_shape.clone(),
                found: entry.shape.clone(),
            });
        }
        let n: usize = want_shape.iter().product();
        let end = entry.offset + n * 4;
        if end > payload.len() {
            return Err(CheckpointError::PayloadLength {
                expected: end,
                found: payload.len(),
            });
        }
        let data = payload[entry.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        named.push((entry.name.clone(), t));
    }
    EncoderModel::from_named(header.config, named).map_err(|e| CheckpointError::Header(e.to_string()))
}

pub fn save_checkpoint(model: &EncoderModel, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EncoderModel, CheckpointError> {
    from_bytes(&fs::read(path)?)
}
