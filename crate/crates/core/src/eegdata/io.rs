//! On-disk session format.
//!
//! A session is a directory holding two files:
//!
//! * `manifest.json` with `version` (1), `electrodes` (ordered labels),
//!   `sample_rate` (256), `n_samples`, `task_category`, `class_label`
//!   (integer or null) and `dtype` (`"f32le"`).
//! * `samples.f32le`, the raw row-major `[C0, P0]` little-endian `f32`
//!   payload with no header.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::electrodes::ElectrodeSet;
use super::session::{Session, TaskCategory, SAMPLE_RATE};
use crate::error::{Error, Result};

pub const SESSION_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "samples.f32le";
const DTYPE: &str = "f32le";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    electrodes: Vec<String>,
    sample_rate: u32,
    n_samples: usize,
    task_category: String,
    class_label: Option<usize>,
    dtype: String,
}

pub fn save_session(session: &Session, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    session.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let es = ElectrodeSet::standard();
    let manifest = Manifest {
        version: SESSION_VERSION,
        electrodes: session
            .channel_ids
            .iter()
            .map(|&id| es.label(id).map(str::to_string))
            .collect::<Result<_>>()?,
        sample_rate: SAMPLE_RATE,
        n_samples: session.n_samples(),
        task_category: session.task_category.as_str().to_string(),
        class_label: session.class_label,
        dtype: DTYPE.to_string(),
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;

    let mut payload = Vec::with_capacity(session.samples.len() * 4);
    for v in session.samples.iter() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let path = dir.join(PAYLOAD_FILE);
    fs::write(&path, payload).map_err(|e| Error::io(&path, e))
}

pub fn load_session(dir: impl AsRef<Path>) -> Result<Session> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let corrupt = |reason: String| Error::CorruptHeader {
        path: mpath.clone(),
        reason,
    };
    let raw: serde_json::Value = serde_json::from_slice(&text).map_err(|e| corrupt(e.to_string()))?;
    // Check the version before the full schema so newer layouts report as such.
    let version = raw
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| corrupt("missing version".into()))? as u32;
    if version != SESSION_VERSION {
        return Err(Error::UnknownVersion {
            found: version,
            expected: SESSION_VERSION,
        });
    }
    let m: Manifest = serde_json::from_value(raw).map_err(|e| corrupt(e.to_string()))?;
    if m.dtype != DTYPE {
        return Err(corrupt(format!("unsupported dtype {:?}", m.dtype)));
    }
    if m.sample_rate != SAMPLE_RATE {
        return Err(corrupt(format!("sample rate {} != {SAMPLE_RATE}", m.sample_rate)));
    }
    let es = ElectrodeSet::standard();
    let ids = m
        .electrodes
        .iter()
        .map(|l| es.index_of(l))
        .collect::<Result<Vec<_>>>()?;
    let task_category: TaskCategory = m.task_category.parse()?;

    let ppath = dir.join(PAYLOAD_FILE);
    let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    let expected = ids.len() * m.n_samples * 4;
    if bytes.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            found: bytes.len(),
        });
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let samples =
        Array2::from_shape_vec((ids.len(), m.n_samples), data).map_err(|e| Error::Shape(e.to_string()))?;
    Session::new(ids, samples, task_category, m.class_label)
}
