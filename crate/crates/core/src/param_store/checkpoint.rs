// EVC1 container layout:
//
//   "EVC1" | header_len: u32 LE | header: UTF-8 JSON | payload: f32 LE values
//
// The header lists one descriptor per tensor, sorted by name, with offsets
// relative to the payload start. Offsets are contiguous (no padding) and
// nbytes = 4 * product(shape). Identical sets always encode to identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParameterSet, TensorEntry};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EVC1";
const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: &str = "f32";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic {0:?}, expected \"EVC1\"")]
    BadMagic(Vec<u8>),
    #[error("file too short for header: need {needed} bytes, have {available}")]
    TruncatedHeader { needed: usize, available: usize },
    #[error("header is not valid JSON: {0}")]
    InvalidHeader(String),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),
    #[error("payload length {actual} does not match descriptors ({expected} bytes)")]
    PayloadLength { expected: u64, actual: u64 },
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("descriptors not sorted by name at {0:?}")]
    UnsortedDescriptors(String),
    #[error("descriptor {name:?}: nbytes {nbytes} inconsistent with shape {shape:?}")]
    DescriptorSize {
        name: String,
        shape: Vec<usize>,
        nbytes: u64,
    },
    #[error("descriptor {name:?}: offset {actual}, expected contiguous offset {expected}")]
    DescriptorOffset { name: String, expected: u64, actual: u64 },
    #[error("tensor {0:?} contains non-finite values")]
    NonFinite(String),
    #[error("invalid content: {0}")]
    InvalidContent(String),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    dtype: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    allow_nonfinite: bool,
    tensors: Vec<Descriptor>,
    meta: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Descriptor {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

pub fn encode(set: &ParameterSet) -> std::result::Result<Vec<u8>, CheckpointError> {
    let mut descriptors = Vec::with_capacity(set.len());
    let mut offset = 0u64;
    for entry in set.tensors() {
        if !set.allows_nonfinite() && !entry.is_finite() {
            return Err(CheckpointError::NonFinite(entry.name().to_string()));
        }
        let nbytes = 4 * entry.numel() as u64;
        descriptors.push(Descriptor {
            name: entry.name().to_string(),
            shape: entry.shape().to_vec(),
            offset,
            nbytes,
        });
        offset += nbytes;
    }
    let header = Header {
        version: FORMAT_VERSION,
        dtype: DTYPE_F32.to_string(),
        allow_nonfinite: set.allows_nonfinite(),
        tensors: descriptors,
        meta: set.meta().clone(),
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| CheckpointError::InvalidHeader(e.to_string()))?;
    let header_len = u32::try_from(header_bytes.len())
        .map_err(|_| CheckpointError::InvalidContent("header exceeds 4 GiB".into()))?;

    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for entry in set.tensors() {
        for v in entry.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> std::result::Result<ParameterSet, CheckpointError> {
    if bytes.len() < 8 {
        if bytes.len() >= 4 && &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic(bytes[..4].to_vec()));
        }
        return Err(CheckpointError::TruncatedHeader {
            needed: 8,
            available: bytes.len(),
        });
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(bytes[..4].to_vec()));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header_end = 8 + header_len;
    if bytes.len() < header_end {
        return Err(CheckpointError::TruncatedHeader {
            needed: header_end,
            available: bytes.len(),
        });
    }
    let header: Header =
        serde_json::from_slice(&bytes[8..header_end]).map_err(|e| CheckpointError::InvalidHeader(e.to_string()))?;
    if header.version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(header.version));
    }
    if header.dtype != DTYPE_F32 {
        return Err(CheckpointError::UnsupportedDtype(header.dtype));
    }

    let mut seen = BTreeSet::new();
    let mut expected_offset = 0u64;
    let mut prev: Option<&str> = None;
    for d in &header.tensors {
        if !seen.insert(d.name.as_str()) {
            return Err(CheckpointError::DuplicateName(d.name.clone()));
        }
        if prev.is_some_and(|p| p > d.name.as_str()) {
            return Err(CheckpointError::UnsortedDescriptors(d.name.clone()));
        }
        prev = Some(&d.name);
        let numel = d.shape.iter().try_fold(1u64, |acc, &x| acc.checked_mul(x as u64));
        if numel.and_then(|n| n.checked_mul(4)) != Some(d.nbytes) {
            return Err(CheckpointError::DescriptorSize {
                name: d.name.clone(),
                shape: d.shape.clone(),
                nbytes: d.nbytes,
            });
        }
        if d.offset != expected_offset {
            return Err(CheckpointError::DescriptorOffset {
                name: d.name.clone(),
                expected: expected_offset,
                actual: d.offset,
            });
        }
        expected_offset += d.nbytes;
    }

    let payload = &bytes[header_end..];
    if payload.len() as u64 != expected_offset {
        return Err(CheckpointError::PayloadLength {
            expected: expected_offset,
            actual: payload.len() as u64,
        });
    }

    let mut set = if header.allow_nonfinite {
        ParameterSet::new_allow_nonfinite()
    } else {
        ParameterSet::new()
    };
    for d in header.tensors {
        let start = d.offset as usize;
        let data: Vec<f32> = payload[start..start + d.nbytes as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if !header.allow_nonfinite && data.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::NonFinite(d.name));
        }
        let entry =
            TensorEntry::new(d.name, d.shape, data).map_err(|e| CheckpointError::InvalidContent(e.to_string()))?;
        set.insert(entry)
            .map_err(|e| CheckpointError::InvalidContent(e.to_string()))?;
    }
    for (k, v) in header.meta {
        set.set_meta(k, v)
            .map_err(|e| CheckpointError::InvalidContent(e.to_string()))?;
    }
    Ok(set)
}

pub fn save(set: &ParameterSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(set).map_err(|source| Error::Checkpoint {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ParameterSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|source| Error::Checkpoint {
        path: path.to_path_buf(),
        source,
    })
}
