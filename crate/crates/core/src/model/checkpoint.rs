//! Versioned binary checkpoint.
//!
//! ```text
//! magic        8 bytes   "EEGFMCKP"
//! version      u32 LE    1
//! header_len   u64 LE    byte length of the JSON header
//! header       UTF-8 JSON {config, tasks, step, meta, tensors: [{path, shape, offset}]}
//! payload      f64 LE, each tensor row-major at `offset` bytes from payload start
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, TaskSpec};
use crate::attention::Mat;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EEGFMCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub path: String,
    pub value: Mat,
}

/// Model parameters plus optional training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tasks: Vec<TaskSpec>,
    pub step: u64,
    /// Free-form training metadata (optimizer step, RNG seeds, ...).
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    path: String,
    shape: [usize; 2],
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    variant: String,
    config: ModelConfig,
    tasks: Vec<TaskSpec>,
    step: u64,
    meta: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

impl Checkpoint {
    pub fn tensor(&self, path: &str) -> Option<&Mat> {
        self.tensors.iter().find(|t| t.path == path).map(|t| &t.value)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let manifest = self
            .tensors
            .iter()
            .map(|t| {
                let e = ManifestEntry {
                    path: t.path.clone(),
                    shape: [t.value.nrows(), t.value.ncols()],
                    offset,
                };
                offset += 8 * t.value.len() as u64;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            variant: self.config.variant.to_string(),
            config: self.config.clone(),
            tasks: self.tasks.clone(),
            step: self.step,
            meta: self.meta.clone(),
            tensors: manifest,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::CorruptHeader {
            path: origin.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnknownVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(corrupt("header length exceeds file size"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(&format!("header json: {e}")))?;
        let payload = &body[hlen..];
        let expected: usize = header.tensors.iter().map(|t| 8 * t.shape[0] * t.shape[1]).sum();
        if payload.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                found: payload.len(),
            });
        }
        let tensors = header
            .tensors
            .into_iter()
            .map(|m| {
                let n = m.shape[0] * m.shape[1];
                let start = m.offset as usize;
                let chunk = payload
                    .get(start..start + 8 * n)
                    .ok_or_else(|| corrupt(&format!("tensor {} out of range", m.path)))?;
                let data: Vec<f64> = chunk
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect();
                let value = Mat::from_shape_vec((m.shape[0], m.shape[1]), data).expect("length checked");
                Ok(TensorEntry { path: m.path, value })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Checkpoint {
            config: header.config,
            tasks: header.tasks,
            step: header.step,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
