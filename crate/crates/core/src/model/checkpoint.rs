//! Binary checkpoint: magic, version, JSON header, little-endian f32 payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Tensor;

use super::config::ModelConfig;
use super::weights::{ParamGroup, Weights};

pub const MAGIC: &[u8; 8] = b"SCONECKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub params: Vec<ManifestEntry>,
}

pub fn checkpoint_bytes(w: &Weights<f32>) -> Result<Vec<u8>> {
    let mut offset = 0;
    let params = w
        .params
        .iter()
        .map(|p| {
            let e = ManifestEntry {
                name: p.name.clone(),
                group: p.group,
                shape: p.value.shape().to_vec(),
                offset,
            };
            offset += 4 * p.value.len();
            e
        })
        .collect();
    let header = serde_json::to_vec(&CheckpointHeader {
        config: w.config.clone(),
        params,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for p in &w.params {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Weights<f32>> {
    if bytes.len() < 16 {
        return Err(Error::LengthMismatch {
            expected: 16,
            found: bytes.len(),
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic bytes)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(Error::LengthMismatch {
            expected: 16 + hlen,
            found: bytes.len(),
        });
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])
        .map_err(|e| Error::Format(format!("corrupt checkpoint header: {e}")))?;
    let payload = &body[hlen..];
    let expected: usize = header
        .params
        .iter()
        .map(|e| 4 * e.shape.iter().product::<usize>())
        .sum();
    if payload.len() != expected {
        return Err(Error::LengthMismatch {
            expected: 16 + hlen + expected,
            found: bytes.len(),
        });
    }
    let mut named = Vec::with_capacity(header.params.len());
    for e in &header.params {
        let n: usize = e.shape.iter().product();
        let end = e.offset + 4 * n;
        let raw = payload.get(e.offset..end).ok_or_else(|| {
            Error::Format(format!("parameter {} lies outside the payload", e.name))
        })?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        named.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    let w = Weights::from_named(&header.config, named)?;
    for (p, e) in w.params.iter().zip(&header.params) {
        if p.group != e.group {
            return Err(Error::Format(format!("parameter {} has group {:?}", e.name, e.group)));
        }
    }
    Ok(w)
}

pub fn save_checkpoint(w: &Weights<f32>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, checkpoint_bytes(w)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Weights<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}
