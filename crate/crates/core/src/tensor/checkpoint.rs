//! Parameter checkpoint container.
//!
//! Layout: an 8-byte little-endian header length `n`, `n` bytes of UTF-8
//! JSON header, then the raw values of every tensor as little-endian `f64`.
//! Header offsets are in bytes from the start of the value section.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::{ParamStore, Tensor};

const FORMAT: &str = "blockcd-params";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint is missing parameter {0:?}")]
    Missing(String),
    #[error("parameter {name:?} has shape {got:?}, model expects {want:?}")]
    ShapeMismatch {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    #[serde(default)]
    meta: Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn encode_checkpoint(store: &ParamStore, meta: &Value) -> Vec<u8> {
    let mut offset = 0;
    let tensors = store
        .iter()
        .map(|p| {
            let e = Entry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
            };
            offset += p.value.numel() * 8;
            e
        })
        .collect();
    let header = Header {
        format: FORMAT.into(),
        version: 1,
        meta: meta.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + offset);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Returns the metadata and `(name, tensor)` pairs in file order.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Value, Vec<(String, Tensor)>), CheckpointError> {
    let bad = |m: &str| CheckpointError::Header(m.to_string());
    if bytes.len() < 8 {
        return Err(bad("file shorter than length prefix"));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let body = bytes.get(8..8 + n).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.format != FORMAT {
        return Err(bad("unknown format tag"));
    }
    let data = &bytes[8 + n..];
    let mut out = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let count: usize = e.shape.iter().product();
        let raw = data
            .get(e.offset..e.offset + count * 8)
            .ok_or_else(|| CheckpointError::Header(format!("{}: values out of bounds", e.name)))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(e.shape, values).map_err(|err| CheckpointError::Header(err.to_string()))?;
        out.push((e.name, t));
    }
    Ok((header.meta, out))
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: &Value) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(store, meta)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads values into an existing store by name and returns the metadata.
/// Every parameter of the store must be present with a matching shape.
pub fn load_checkpoint(path: &Path, store: &mut ParamStore) -> Result<Value, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let (meta, tensors) = decode_checkpoint(&bytes)?;
    load_values(store, tensors)?;
    Ok(meta)
}

pub(crate) fn load_values(store: &mut ParamStore, tensors: Vec<(String, Tensor)>) -> Result<(), CheckpointError> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.get(id).name.clone();
        let (_, t) = tensors
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
        if t.shape() != store.value(id).shape() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                got: t.shape().to_vec(),
                want: store.value(id).shape().to_vec(),
            });
        }
        *store.value_mut(id) = t.clone();
    }
    Ok(())
}
