//! "SFDC" checkpoint container.
//!
//! Layout: 4-byte magic `SFDC`, u32 version (LE), u64 JSON-header length
//! (LE), JSON manifest `[{name, shape, byte_offset}]`, then a raw
//! little-endian f32 blob. Entries are stored sorted by name; byte offsets
//! are relative to the start of the blob. Round-trips are bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SFDC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic (expected SFDC)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("manifest entry {name}: {detail}")]
    Entry { name: String, detail: String },
    #[error("checkpoint is missing tensor {0}")]
    Missing(String),
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    byte_offset: u64,
}

pub fn write_checkpoint(path: &Path, entries: &BTreeMap<String, Tensor>) -> Result<(), CheckpointError> {
    let mut manifest = Vec::with_capacity(entries.len());
    let mut offset = 0u64;
    for (name, t) in entries {
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            byte_offset: offset,
        });
        offset += (t.numel() * 4) as u64;
    }
    let header = serde_json::to_vec(&manifest)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for t in entries.values() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let header_len = u64::from_le_bytes(buf8) as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)?;
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(&header)?;
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    let mut out = BTreeMap::new();
    for e in manifest {
        let numel: usize = e.shape.iter().product();
        let start = e.byte_offset as usize;
        let end = start + numel * 4;
        if end > blob.len() {
            return Err(CheckpointError::Entry {
                name: e.name,
                detail: format!("blob too short: need {end} bytes, have {}", blob.len()),
            });
        }
        let data: Vec<f32> = blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.insert(e.name, Tensor::new(e.shape, data));
    }
    Ok(out)
}

/// Read a checkpoint and require a set of tensor names to be present.
pub fn load_checkpoint(
    path: &Path,
    required: &[&str],
) -> Result<BTreeMap<String, Tensor>, CheckpointError> {
    let map = read_checkpoint(path)?;
    for name in required {
        if !map.contains_key(*name) {
            return Err(CheckpointError::Missing((*name).to_string()));
        }
    }
    Ok(map)
}
