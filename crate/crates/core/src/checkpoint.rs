//! Self-verifying checkpoint files. Layout:
//!
//! ```text
//! magic "XFERCKPT"            8 bytes
//! header length               u64 little-endian
//! header                      JSON (model spec + parameter table)
//! payload                     concatenated f64 little-endian parameters
//! trailer                     sha256 over everything before it, 32 bytes
//! ```
//!
//! Any flipped byte fails the trailer check on restore.

use crate::adapters::{ArchRegistry, ModelAdapter, ModelSpec};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 8] = b"XFERCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelSpec,
    params: Vec<ParamEntry>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn spec_of(adapter: &dyn ModelAdapter) -> ModelSpec {
    let m = adapter.meta();
    ModelSpec {
        model_id: m.model_id.clone(),
        arch: adapter.arch_name().to_string(),
        family: m.family,
        num_classes: m.num_classes,
        input_size: m.input_size,
        channels: m.channels,
        mean: m.mean.clone(),
        std: m.std.clone(),
        seed: 0,
        arch_params: adapter.arch_params(),
    }
}

/// Serialize an adapter's parameters. Returns the file's content hash.
pub fn save(adapter: &dyn ModelAdapter, path: &Path) -> Result<String> {
    let named = adapter.named_params();
    let header = Header {
        version: FORMAT_VERSION,
        model: spec_of(adapter),
        params: named
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.clone(),
                shape: t.shape(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::Integrity(format!("header encode: {e}")))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for (_, t) in &named {
        let v = t.value();
        let slice = v.as_standard_layout().to_owned();
        for x in slice.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, &buf)?;
    Ok(hex(&digest))
}

struct Verified {
    header: Header,
    payload: Vec<f64>,
    hash: String,
}

fn read_verified(path: &Path) -> Result<Verified> {
    let buf = fs::read(path)?;
    if buf.len() < MAGIC.len() + 8 + 32 {
        return Err(Error::Integrity(format!("{} is too short to be a checkpoint", path.display())));
    }
    let (body, trailer) = buf.split_at(buf.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != trailer {
        return Err(Error::Integrity(format!(
            "{}: content hash mismatch (file corrupted or tampered)",
            path.display()
        )));
    }
    if &body[..8] != MAGIC {
        return Err(Error::Integrity(format!("{} is not a checkpoint file", path.display())));
    }
    let hlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    if 16 + hlen > body.len() {
        return Err(Error::Integrity("header length exceeds file size".into()));
    }
    let header: Header = serde_json::from_slice(&body[16..16 + hlen])
        .map_err(|e| Error::Integrity(format!("header decode: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Integrity(format!("unsupported checkpoint version {}", header.version)));
    }
    let payload_bytes = &body[16 + hlen..];
    if payload_bytes.len() % 8 != 0 {
        return Err(Error::Integrity("payload is not a whole number of f64 values".into()));
    }
    let payload: Vec<f64> = payload_bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Verified {
        header,
        payload,
        hash: hex(&digest),
    })
}

fn fill_params(adapter: &dyn ModelAdapter, header: &Header, payload: &[f64]) -> Result<()> {
    let named = adapter.named_params();
    if named.len() != header.params.len() {
        return Err(Error::Integrity(format!(
            "checkpoint has {} parameters, model has {}",
            header.params.len(),
            named.len()
        )));
    }
    let mut offset = 0usize;
    for ((name, tensor), entry) in named.iter().zip(&header.params) {
        if name != &entry.name || tensor.shape() != entry.shape {
            return Err(Error::Integrity(format!(
                "parameter mismatch: model {name} {:?} vs checkpoint {} {:?}",
                tensor.shape(),
                entry.name,
                entry.shape
            )));
        }
        let n: usize = entry.shape.iter().product();
        if offset + n > payload.len() {
            return Err(Error::Integrity("payload shorter than parameter table".into()));
        }
        let arr = ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&entry.shape), payload[offset..offset + n].to_vec())
            .map_err(|e| Error::Integrity(format!("parameter reshape: {e}")))?;
        tensor.set_data(arr);
        offset += n;
    }
    if offset != payload.len() {
        return Err(Error::Integrity("payload longer than parameter table".into()));
    }
    Ok(())
}

/// Rebuild a model from a checkpoint. The restored adapter is trainable;
/// freeze it for witness use.
pub fn restore(path: &Path) -> Result<Box<dyn ModelAdapter>> {
    let v = read_verified(path)?;
    let adapter = ArchRegistry::builtin().build(&v.header.model)?;
    fill_params(adapter.as_ref(), &v.header, &v.payload)?;
    Ok(adapter)
}

/// Load checkpointed parameters into an existing adapter of the same
/// architecture (divergence rollback).
pub fn restore_into(path: &Path, adapter: &dyn ModelAdapter) -> Result<()> {
    let v = read_verified(path)?;
    if v.header.model.arch != adapter.arch_name() {
        return Err(Error::Integrity(format!(
            "checkpoint architecture '{}' does not match model '{}'",
            v.header.model.arch,
            adapter.arch_name()
        )));
    }
    fill_params(adapter, &v.header, &v.payload)
}

/// Verify a checkpoint file and return its content hash.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(read_verified(path)?.hash)
}

/// Hash of an adapter's current parameter values (order-sensitive).
pub fn param_hash(adapter: &dyn ModelAdapter) -> String {
    let mut hasher = Sha256::new();
    for (name, t) in adapter.named_params() {
        hasher.update(name.as_bytes());
        let v = t.value();
        for x in v.as_standard_layout().iter() {
            hasher.update(x.to_le_bytes());
        }
    }
    hex(&hasher.finalize())
}
