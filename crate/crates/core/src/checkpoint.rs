//! Binary checkpoints.
//!
//! Layout:
//!
//! ```text
//! "CHED" | version: u32 LE | header_len: u64 LE | header JSON | payload
//! ```
//!
//! The header is `{"configs": ..., "tensors": [{"name", "shape", "offset"}]}`
//! with byte offsets into the payload. The payload is every tensor's values
//! as little-endian `f64`, in name order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::params::{ParamSet, TensorEntry};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CHED";
pub const VERSION: u32 = 1;
/// Upper bound on the header size accepted by the loader.
const MAX_HEADER: u64 = 64 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub configs: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub configs: serde_json::Value,
}

pub fn encode_checkpoint(params: &ParamSet, configs: &serde_json::Value) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (name, t) in params.iter() {
        tensors.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset });
        offset += 8 * t.numel();
    }
    let header = serde_json::to_vec(&CheckpointHeader { configs: configs.clone(), tensors })?;
    let mut out = Vec::with_capacity(16 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Splits a checkpoint into its parsed header and raw payload.
pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        bail!(Format, "not a checkpoint (bad magic)");
    }
    if bytes.len() < 16 {
        bail!(Format, "checkpoint truncated inside the fixed preamble");
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        bail!(Format, "unsupported checkpoint version {version} (expected {VERSION})");
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if len > MAX_HEADER || len > (bytes.len() - 16) as u64 {
        bail!(Format, "checkpoint header length {len} exceeds the file");
    }
    let end = 16 + len as usize;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..end])
        .map_err(|e| crate::Error::Format(format!("checkpoint header is not valid JSON: {e}")))?;
    Ok((header, &bytes[end..]))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, payload) = read_header(bytes)?;
    let mut params = ParamSet::new();
    let mut expected = 0usize;
    for e in &header.tensors {
        let numel = e.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let Some(bytes_len) = numel.and_then(|n| n.checked_mul(8)) else {
            bail!(Format, "tensor '{}' has an overflowing shape {:?}", e.name, e.shape);
        };
        if e.offset != expected {
            bail!(Format, "tensor '{}' at offset {} breaks the contiguous layout (expected {expected})", e.name, e.offset);
        }
        let Some(end) = e.offset.checked_add(bytes_len).filter(|&end| end <= payload.len()) else {
            bail!(Format, "checkpoint payload truncated: tensor '{}' needs bytes {}..{} of {}", e.name, e.offset, e.offset.saturating_add(bytes_len), payload.len());
        };
        let data = payload[e.offset..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if params.get(&e.name).is_some() {
            bail!(Format, "duplicate tensor '{}'", e.name);
        }
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        expected = end;
    }
    if expected != payload.len() {
        bail!(Format, "checkpoint has {} trailing payload bytes", payload.len() - expected);
    }
    Ok(Checkpoint { params, configs: header.configs })
}

pub fn save_checkpoint(path: &Path, params: &ParamSet, configs: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_checkpoint(params, configs)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
