//! Versioned single-file archive of named float32 arrays.
//!
//! ```text
//! b"TADACKPT" | u32 version | u64 header length | header JSON | f32 LE data
//! ```

use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::ParamGroup;
use crate::error::{Result, TadaError};

const MAGIC: &[u8; 8] = b"TADACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct ArchiveEntry {
    pub name: String,
    pub group: Option<ParamGroup>,
    pub tensor: Tensor,
}

#[derive(Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    group: Option<ParamGroup>,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    entries: Vec<EntryHeader>,
    total_floats: usize,
}

pub struct Archive {
    pub meta: serde_json::Value,
    pub entries: Vec<ArchiveEntry>,
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&ArchiveEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

pub fn save_archive(path: &Path, meta: &serde_json::Value, entries: &[ArchiveEntry]) -> Result<()> {
    let mut data: Vec<f32> = Vec::new();
    let mut headers = Vec::with_capacity(entries.len());
    for e in entries {
        headers.push(EntryHeader {
            name: e.name.clone(),
            group: e.group,
            shape: e.tensor.dims().to_vec(),
            offset: data.len(),
        });
        data.extend(e.tensor.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?);
    }
    let header = serde_json::to_vec(&Header {
        meta: meta.clone(),
        entries: headers,
        total_floats: data.len(),
    })?;
    let mut out = Vec::with_capacity(20 + header.len() + 4 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, out)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_archive(path: &Path) -> Result<Archive> {
    let bytes = fs::read(path)?;
    let bad = |reason: &str| TadaError::format(path, reason.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint archive"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("checkpoint version {version} not supported")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&format!("corrupted header: {e}")))?;
    let data = &bytes[20 + hlen..];
    if data.len() != header.total_floats * 4 {
        return Err(bad("data length does not match header"));
    }
    let floats: Vec<f32> = data
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mut entries = Vec::with_capacity(header.entries.len());
    for h in header.entries {
        let n: usize = h.shape.iter().product();
        let slice = floats
            .get(h.offset..h.offset + n)
            .ok_or_else(|| bad(&format!("entry {} out of range", h.name)))?;
        entries.push(ArchiveEntry {
            name: h.name,
            group: h.group,
            tensor: Tensor::from_slice(slice, h.shape.as_slice(), &Device::Cpu)?,
        });
    }
    Ok(Archive {
        meta: header.meta,
        entries,
    })
}
