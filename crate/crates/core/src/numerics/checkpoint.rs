//! Checkpoint container: an 8-byte little-endian header length, a JSON header
//! mapping each tensor name to its shape, dtype and byte offset, then the raw
//! little-endian `f64` payload.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Params, Tensor};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint header is not valid JSON: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint file truncated: expected {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("unsupported dtype `{dtype}` for tensor `{name}`")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("tensor `{name}` payload range {offset}..{end} is out of bounds")]
    BadOffset { name: String, offset: usize, end: usize },
    #[error("checkpoint does not match the model definition: {0}")]
    Mismatch(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tensors: BTreeMap<String, HeaderEntry>,
}

pub fn save_checkpoint(path: &Path, params: &Params) -> Result<(), CheckpointError> {
    let mut header = Header {
        tensors: BTreeMap::new(),
    };
    let mut payload: Vec<u8> = Vec::new();
    for (name, t) in params.iter() {
        header.tensors.insert(
            name.clone(),
            HeaderEntry {
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                offset: payload.len(),
            },
        );
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header_bytes = serde_json::to_vec(&header)?;
    let mut file = File::create(path)?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    file.write_all(&payload)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Params, CheckpointError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(CheckpointError::Truncated {
            expected: 8,
            found: bytes.len(),
        });
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + header_len {
        return Err(CheckpointError::Truncated {
            expected: 8 + header_len,
            found: bytes.len(),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[8..8 + header_len])?;
    let payload = &bytes[8 + header_len..];

    let mut params = Params::new();
    for (name, entry) in header.tensors {
        if entry.dtype != "f64" {
            return Err(CheckpointError::UnsupportedDtype {
                name,
                dtype: entry.dtype,
            });
        }
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + n * 8;
        if end > payload.len() {
            return Err(CheckpointError::BadOffset {
                name,
                offset: entry.offset,
                end,
            });
        }
        let data: Vec<f64> = payload[entry.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::new(entry.shape, data).expect("header shape"));
    }
    Ok(params)
}

/// Load a checkpoint and validate its names and shapes against a model
/// definition (any parameter set with the expected layout).
pub fn load_checkpoint_validated(
    path: &Path,
    definition: &Params,
) -> Result<Params, CheckpointError> {
    let loaded = load_checkpoint(path)?;
    let mut problems = Vec::new();
    for (name, t) in definition.iter() {
        match loaded.get(name) {
            None => problems.push(format!("missing tensor `{name}`")),
            Some(l) if l.shape() != t.shape() => problems.push(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                l.shape(),
                t.shape()
            )),
            _ => {}
        }
    }
    for (name, _) in loaded.iter() {
        if definition.get(name).is_none() {
            problems.push(format!("unexpected tensor `{name}`"));
        }
    }
    if !problems.is_empty() {
        return Err(CheckpointError::Mismatch(problems.join("; ")));
    }
    Ok(loaded)
}
