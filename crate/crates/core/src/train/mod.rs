//! Optimization: schedule, AdamW, pretraining and finetuning loops,
//! gradient checking and run-directory plumbing.
//!
//! Each step draws its randomness from a generator seeded by
//! `(seed, step)`, so a run resumed from a checkpoint continues exactly as
//! the uninterrupted run would.

mod config;
mod data;
mod finetune;
mod gradcheck;
mod optim;
mod pretrain;
mod schedule;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::KvConfig;
pub use data::{session_windows, Corpus, DownstreamTask};
pub use finetune::{evaluate, finetune, predict, EpochMetrics, FinetuneConfig, FinetuneReport};
pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckEntry, GradCheckReport};
pub use optim::{clip_global_norm, AdamW, AdamWConfig, StepOutcome};
pub use pretrain::{kind_at, pretrain, pretrain_loss, PretrainConfig, PretrainLoss, PretrainReport, PretrainState};
pub use schedule::{ScheduleConfig, FINETUNE_PEAK_LR, PRETRAIN_PEAK_LR, WARMUP_FRACTION};

use crate::attention::Mat;
use crate::autograd::Grads;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, TensorEntry};
use crate::params::{Bound, ParamStore};

/// One line of `logs/steps.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub task: String,
    pub loss: f64,
    pub reconstruction: f64,
    pub task_token: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub classification: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
    pub skipped: bool,
}

/// Mean of consecutive non-overlapping windows of `window` values.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    values
        .chunks(window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

/// Run-directory layout: `config-manifest.json`, `checkpoints/`,
/// `logs/steps.jsonl`, `metrics/*.json`.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        for sub in ["checkpoints", "logs", "metrics"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(RunDir { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("config-manifest.json")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics")
    }

    pub fn steps_log(&self) -> PathBuf {
        self.root.join("logs").join("steps.jsonl")
    }
}

pub(crate) struct StepLogWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl StepLogWriter {
    pub(crate) fn open(path: &Path, append: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(StepLogWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub(crate) fn write(&mut self, entry: &StepLog) -> Result<()> {
        serde_json::to_writer(&mut self.out, entry)?;
        writeln!(self.out).and_then(|_| self.out.flush()).map_err(|e| Error::io(&self.path, e))
    }
}

/// Reads a JSON-lines step log.
pub fn read_step_log(path: impl AsRef<Path>) -> Result<Vec<StepLog>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Gradient of every parameter, `None` where the graph never touched it.
pub(crate) fn collect_grads(store: &ParamStore, p: &Bound, grads: &Grads) -> Vec<Option<Mat>> {
    store.ids().map(|id| grads.get(p[id]).cloned()).collect()
}

const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

pub(crate) fn optimizer_tensors(opt: &AdamW, store: &ParamStore) -> Vec<TensorEntry> {
    let (m, v) = opt.moments();
    let mut out = Vec::with_capacity(2 * m.len());
    for (e, (m, v)) in store.entries().iter().zip(m.iter().zip(v)) {
        out.push(TensorEntry {
            path: format!("{M_PREFIX}{}", e.path),
            value: m.clone(),
        });
        out.push(TensorEntry {
            path: format!("{V_PREFIX}{}", e.path),
            value: v.clone(),
        });
    }
    out
}

pub(crate) fn optimizer_from_checkpoint(ck: &Checkpoint, store: &ParamStore) -> Result<AdamW> {
    let step = ck
        .meta
        .get("optimizer_step")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Config("checkpoint carries no optimizer state".into()))?;
    let mut m = Vec::with_capacity(store.len());
    let mut v = Vec::with_capacity(store.len());
    for e in store.entries() {
        let get = |prefix: &str| {
            ck.tensor(&format!("{prefix}{}", e.path))
                .cloned()
                .ok_or_else(|| Error::Config(format!("checkpoint lacks optimizer moments for {}", e.path)))
        };
        m.push(get(M_PREFIX)?);
        v.push(get(V_PREFIX)?);
    }
    let config = match ck.meta.get("optimizer") {
        Some(c) => serde_json::from_value(c.clone())?,
        None => AdamWConfig::default(),
    };
    Ok(AdamW::from_moments(config, step, m, v))
}
