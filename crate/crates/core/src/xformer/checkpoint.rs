//! Binary checkpoint layout:
//!
//! ```text
//! b"SUGMINE1"                 8 bytes
//! header length               u64 little-endian
//! header                      UTF-8 JSON: {version, config, d_emb, tensors: [{name, group, rows, cols}]}
//! tensor data                 f64 little-endian, tensors in header order, row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamGroup, TransformerConfig, TransformerModel};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SUGMINE1";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: ParamGroup,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: TransformerConfig,
    d_emb: usize,
    tensors: Vec<TensorEntry>,
}

impl TransformerModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            version: VERSION,
            config: self.config.clone(),
            d_emb: self.d_emb,
            tensors: self
                .params()
                .into_iter()
                .map(|(name, group, m)| TensorEntry {
                    name,
                    group,
                    rows: m.rows(),
                    cols: m.cols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.parameter_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, m) in self.params() {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic, not a sugmine checkpoint"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| bad("truncated header length"))?;
        let len = u64::from_le_bytes(len) as usize;
        if r.len() < len {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&r[..len]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        r = &r[len..];
        if header.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
        }
        header.config.validate()?;
        let mut model = TransformerModel::zeros(header.config, header.d_emb);
        let mut slots = model.params_mut();
        if slots.len() != header.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "header lists {} tensors, config implies {}",
                header.tensors.len(),
                slots.len()
            )));
        }
        for ((name, group, m), entry) in slots.iter_mut().zip(&header.tensors) {
            if *name != entry.name || *group != entry.group || m.shape() != (entry.rows, entry.cols) {
                return Err(Error::Checkpoint(format!(
                    "tensor {} ({}x{}) does not match expected {name} {:?}",
                    entry.name,
                    entry.rows,
                    entry.cols,
                    m.shape()
                )));
            }
            for v in m.data_mut() {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|_| bad("truncated tensor data"))?;
                *v = f64::from_le_bytes(b);
            }
        }
        drop(slots);
        if !r.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
