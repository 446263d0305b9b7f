//! Config files resolved into training configurations.
//!
//! Every key read is recorded with the value actually used, defaults
//! included, so the manifest written next to a run holds the complete
//! configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use eegfm::losses::LossWeights;
use eegfm::train::{AdamWConfig, FinetuneConfig, KvConfig, PretrainConfig};
use eegfm::Variant;
use serde::Serialize;

use crate::{Failure, Outcome};

pub struct Resolver {
    cfg: KvConfig,
    resolved: BTreeMap<String, String>,
}

impl Resolver {
    /// Reads `path` (a key-value file or an earlier run's manifest), then
    /// applies `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[String], run_dir: Option<&Path>) -> Outcome<Self> {
        let path = path.ok_or_else(|| Failure::Usage("missing --config".into()))?;
        if !path.is_file() {
            return Err(Failure::Usage(format!("config file {} not found", path.display())));
        }
        let mut cfg = if path.extension().is_some_and(|e| e == "json") {
            let text = fs::read_to_string(path).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
            let manifest: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
            let map = manifest
                .get("config")
                .and_then(|c| c.as_object())
                .ok_or_else(|| Failure::Validation(format!("{} has no config object", path.display())))?;
            let mut cfg = KvConfig::default();
            for (k, v) in map {
                let v = v.as_str().ok_or_else(|| Failure::Validation(format!("config value of {k} is not a string")))?;
                cfg.set_override(&format!("{k}={v}"))?;
            }
            cfg
        } else {
            KvConfig::load(path)?
        };
        for o in overrides {
            cfg.set_override(o)?;
        }
        if let Some(dir) = run_dir {
            cfg.set_override(&format!("run_dir={}", dir.display()))?;
        }
        Ok(Resolver {
            cfg,
            resolved: BTreeMap::new(),
        })
    }

    pub fn get<T>(&mut self, key: &str, default: T) -> Outcome<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = self.cfg.take(key)?.unwrap_or(default);
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    pub fn require<T>(&mut self, key: &str) -> Outcome<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v: T = self
            .cfg
            .take(key)?
            .ok_or_else(|| Failure::Validation(format!("missing required key {key:?}")))?;
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    pub fn path(&mut self, key: &str) -> Outcome<PathBuf> {
        self.require::<String>(key).map(PathBuf::from)
    }

    /// Keys starting with `prefix`, not yet consumed.
    pub fn keys_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.cfg.entries().keys().filter(|k| k.starts_with(prefix)).cloned().collect()
    }

    pub fn finish(self) -> Outcome<BTreeMap<String, String>> {
        self.cfg.finish()?;
        Ok(self.resolved)
    }
}

fn optim(r: &mut Resolver) -> Outcome<AdamWConfig> {
    let d = AdamWConfig::default();
    Ok(AdamWConfig {
        beta1: r.get("beta1", d.beta1)?,
        beta2: r.get("beta2", d.beta2)?,
        eps: r.get("eps", d.eps)?,
        weight_decay: r.get("weight_decay", d.weight_decay)?,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainSettings {
    pub run_dir: PathBuf,
    pub data: PathBuf,
    pub variant: Variant,
    pub model_seed: u64,
    pub resume: Option<PathBuf>,
    pub train: PretrainConfig,
}

impl PretrainSettings {
    pub fn resolve(mut r: Resolver) -> Outcome<(Self, BTreeMap<String, String>)> {
        let d = PretrainConfig::default();
        let w = LossWeights::default();
        let resume: String = r.get("resume", String::new())?;
        let s = PretrainSettings {
            run_dir: r.path("run_dir")?,
            data: r.path("data")?,
            variant: r.get("variant", Variant::Tiny)?,
            model_seed: r.get("model_seed", 0u64)?,
            resume: (!resume.is_empty()).then(|| PathBuf::from(resume)),
            train: PretrainConfig {
                steps: r.get("steps", d.steps)?,
                batch_size: r.get("batch_size", d.batch_size)?,
                window: r.get("window", d.window)?,
                peak_lr: r.get("peak_lr", d.peak_lr)?,
                min_lr: r.get("min_lr", d.min_lr)?,
                warmup_fraction: r.get("warmup_fraction", d.warmup_fraction)?,
                optim: optim(&mut r)?,
                clip_norm: r.get("clip_norm", d.clip_norm)?,
                weights: LossWeights {
                    gpt: r.get("lambda_gpt", w.gpt)?,
                    mae_tp: r.get("lambda_mae_tp", w.mae_tp)?,
                    mae_ch: r.get("lambda_mae_ch", w.mae_ch)?,
                    task: r.get("lambda_task", w.task)?,
                    alpha: w.alpha,
                },
                seed: r.get("seed", d.seed)?,
                checkpoint_every: r.get("checkpoint_every", d.checkpoint_every)?,
            },
        };
        s.train.validate()?;
        Ok((s, r.finish()?))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TaskSource {
    pub name: String,
    pub data: PathBuf,
    /// Class labels to keep; all when empty.
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FinetuneSettings {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub tasks: Vec<TaskSource>,
    pub window: usize,
    pub val_fraction: f64,
    pub split_seed: u64,
    pub train: FinetuneConfig,
}

fn parse_classes(text: &str) -> Outcome<Vec<usize>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| Failure::Validation(format!("class list {text:?}: {e}"))))
        .collect()
}

impl FinetuneSettings {
    pub fn resolve(mut r: Resolver) -> Outcome<(Self, BTreeMap<String, String>)> {
        let mut tasks = Vec::new();
        for key in r.keys_with_prefix("task.") {
            let name = &key["task.".len()..];
            if name.contains('.') {
                continue;
            }
            let data = r.path(&key)?;
            let classes = parse_classes(&r.get(&format!("{key}.classes"), String::new())?)?;
            tasks.push(TaskSource {
                name: name.to_string(),
                data,
                classes,
            });
        }
        if tasks.is_empty() {
            return Err(Failure::Validation("no `task.<name> = <dataset dir>` entries".into()));
        }
        let d = FinetuneConfig::default();
        let s = FinetuneSettings {
            run_dir: r.path("run_dir")?,
            checkpoint: r.path("checkpoint")?,
            tasks,
            window: r.get("window", 6usize)?,
            val_fraction: r.get("val_fraction", 0.2f64)?,
            split_seed: r.get("split_seed", 0u64)?,
            train: FinetuneConfig {
                epochs: r.get("epochs", d.epochs)?,
                batch_size: r.get("batch_size", d.batch_size)?,
                peak_lr: r.get("peak_lr", d.peak_lr)?,
                min_lr: r.get("min_lr", d.min_lr)?,
                warmup_fraction: r.get("warmup_fraction", d.warmup_fraction)?,
                optim: optim(&mut r)?,
                clip_norm: r.get("clip_norm", d.clip_norm)?,
                alpha: r.get("alpha", d.alpha)?,
                seed: r.get("seed", d.seed)?,
                eval_batch: r.get("eval_batch", d.eval_batch)?,
            },
        };
        s.train.validate()?;
        if !(0.0..1.0).contains(&s.val_fraction) {
            return Err(Failure::Validation(format!("val_fraction {} outside [0, 1)", s.val_fraction)));
        }
        Ok((s, r.finish()?))
    }
}
