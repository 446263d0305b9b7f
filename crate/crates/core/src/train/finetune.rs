use std::rc::Rc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::DownstreamTask;
use super::optim::{clip_global_norm, AdamW, AdamWConfig, StepOutcome};
use super::schedule::{ScheduleConfig, FINETUNE_PEAK_LR, WARMUP_FRACTION};
use super::{collect_grads, write_json, RunDir, StepLog, StepLogWriter};
use crate::attention::Mat;
use crate::autograd::Tape;
use crate::eegdata::{PatchBatch, PATCH_LEN};
use crate::error::{Error, Result};
use crate::losses::class_weights;
use crate::masking::MaskPlan;
use crate::metrics::MetricReport;
use crate::model::{all_pairs, reference_rows, Layout, Model};
use crate::params::{derive_seed, Bound};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_fraction: f64,
    pub optim: AdamWConfig,
    pub clip_norm: f64,
    /// Classification weight α.
    pub alpha: f64,
    pub seed: u64,
    pub eval_batch: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 10,
            batch_size: 8,
            peak_lr: FINETUNE_PEAK_LR,
            min_lr: 0.0,
            warmup_fraction: WARMUP_FRACTION,
            optim: AdamWConfig::default(),
            clip_norm: 1.0,
            alpha: 0.9,
            seed: 0,
            eval_batch: 32,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::Config("epochs and batch sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub reports: Vec<MetricReport>,
    /// Mean validation balanced accuracy across tasks.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneReport {
    pub history: Vec<StepLog>,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_score: f64,
}

impl FinetuneReport {
    pub fn best(&self) -> &EpochMetrics {
        &self.epochs[self.best_epoch]
    }
}

/// Softmax probabilities of task `task` for each window.
pub fn predict(model: &Model, task: usize, windows: &[PatchBatch], chunk: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(windows.len());
    for part in windows.chunks(chunk.max(1)) {
        let batch = PatchBatch::collate(part)?;
        let plans = vec![MaskPlan::unmasked(); batch.batch_size()];
        let mut tape = Tape::new();
        let p = model.store().bind_constant(&mut tape);
        let enc = model.encode(&mut tape, &p, &batch, &plans)?;
        let logits = model.finetune_logits(&mut tape, &p, &enc, task)?;
        out.extend(tape.value(logits).rows().into_iter().map(|r| softmax(r.as_slice().expect("row-major"))));
    }
    Ok(out)
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Metric report of a model on labelled windows.
pub fn evaluate(model: &Model, task: usize, items: &[(PatchBatch, usize)], split: &str, chunk: usize) -> Result<MetricReport> {
    let windows: Vec<PatchBatch> = items.iter().map(|(w, _)| w.clone()).collect();
    let truth: Vec<usize> = items.iter().map(|(_, c)| *c).collect();
    let probs = predict(model, task, &windows, chunk)?;
    let name = &model.tasks()[task].name;
    MetricReport::evaluate(name, split, &truth, &probs)
}

struct StepLoss {
    total: f64,
    classification: f64,
    reconstruction: f64,
    grads: Vec<Option<Mat>>,
}

fn step_loss(model: &Model, task: usize, batch: &PatchBatch, labels: Vec<usize>, weights: &[f64], alpha: f64) -> Result<StepLoss> {
    let plans = vec![MaskPlan::unmasked(); batch.batch_size()];
    let mut tape = Tape::new();
    let p: Bound = model.store().bind(&mut tape);
    let enc = model.encode(&mut tape, &p, batch, &plans)?;
    let logits = model.finetune_logits(&mut tape, &p, &enc, task)?;
    let cls = tape.cross_entropy(logits, Rc::new(labels), Some(Rc::new(weights.to_vec())));
    let (total, rec) = if alpha < 1.0 {
        let q = model.decode(&mut tape, &p, &enc, batch, &plans);
        let pred = model.pretrain_head(&mut tape, &p, q);
        let pairs = all_pairs(Layout::of(batch), &batch.valid_channels);
        let rec = tape.patch_rmse(pred, Rc::new(reference_rows(batch)?), Rc::new(pairs), PATCH_LEN);
        (tape.weighted_sum(&[(cls, alpha), (rec, 1.0 - alpha)]), Some(rec))
    } else {
        (tape.weighted_sum(&[(cls, alpha)]), None)
    };
    let grads = tape.backward(total);
    Ok(StepLoss {
        total: tape.scalar(total),
        classification: tape.scalar(cls),
        reconstruction: rec.map_or(0.0, |r| tape.scalar(r)),
        grads: collect_grads(model.store(), &p, &grads),
    })
}

/// Multi-task finetuning with proportional task sampling; the model ends
/// holding the parameters of the best validation epoch.
pub fn finetune(model: &mut Model, tasks: &[DownstreamTask], cfg: &FinetuneConfig, run: Option<&RunDir>) -> Result<FinetuneReport> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Config("no downstream tasks".into()));
    }
    let mut idx = Vec::with_capacity(tasks.len());
    let mut weights = Vec::with_capacity(tasks.len());
    for t in tasks {
        if t.classes() < 2 {
            return Err(Error::Config(format!("task {:?} has fewer than 2 classes", t.name)));
        }
        if t.train.is_empty() || t.val.is_empty() {
            return Err(Error::Config(format!("task {:?} has an empty split", t.name)));
        }
        let i = match model.task_index(&t.name) {
            Ok(i) if model.tasks()[i].classes == t.classes() => i,
            Ok(_) => return Err(Error::Config(format!("task {:?} registered with a different class count", t.name))),
            Err(_) => model.register_task(&t.name, t.classes())?,
        };
        idx.push(i);
        let counts: Vec<f64> = t.class_counts().iter().map(|&c| c as f64).collect();
        weights.push(class_weights(&counts)?);
    }
    let total_train: usize = tasks.iter().map(|t| t.train.len()).sum();
    let steps_per_epoch = total_train.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let schedule = ScheduleConfig::with_warmup_fraction(cfg.peak_lr, total_steps, cfg.warmup_fraction, cfg.min_lr)?;
    let picker = WeightedIndex::new(tasks.iter().map(|t| t.train.len())).map_err(|e| Error::Config(e.to_string()))?;
    let mut opt = AdamW::new(cfg.optim, model.store());
    let mut log = match run {
        Some(r) => Some(StepLogWriter::open(&r.steps_log(), false)?),
        None => None,
    };

    let mut history = Vec::with_capacity(total_steps);
    let mut epochs: Vec<EpochMetrics> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, crate::params::ParamStore)> = None;
    for epoch in 0..cfg.epochs {
        for s in 0..steps_per_epoch {
            let step = epoch * steps_per_epoch + s;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, step as u64));
            let k = picker.sample(&mut rng);
            let task = &tasks[k];
            let n = cfg.batch_size.min(task.train.len());
            let picks = sample(&mut rng, task.train.len(), n).into_vec();
            let windows: Vec<PatchBatch> = picks.iter().map(|&i| task.train[i].0.clone()).collect();
            let labels: Vec<usize> = picks.iter().map(|&i| task.train[i].1).collect();
            let batch = PatchBatch::collate(&windows)?;
            let mut out = step_loss(model, idx[k], &batch, labels, &weights[k], cfg.alpha)?;
            let grad_norm = clip_global_norm(&mut out.grads, cfg.clip_norm);
            let lr = schedule.lr_at(step + 1);
            let outcome = opt.step(model.store_mut(), &out.grads, lr)?;
            let entry = StepLog {
                step,
                task: task.name.clone(),
                loss: out.total,
                reconstruction: out.reconstruction,
                task_token: 0.0,
                classification: Some(out.classification),
                lr,
                grad_norm,
                skipped: outcome == StepOutcome::SkippedNonFinite,
            };
            if let Some(w) = log.as_mut() {
                w.write(&entry)?;
            }
            history.push(entry);
        }
        let reports = tasks
            .iter()
            .zip(&idx)
            .map(|(t, &i)| evaluate(model, i, &t.val, "val", cfg.eval_batch))
            .collect::<Result<Vec<_>>>()?;
        let score = reports.iter().map(|r| r.balanced_accuracy).sum::<f64>() / reports.len() as f64;
        log::info!("finetune epoch {epoch}: mean val balanced accuracy {score:.4}");
        if best.as_ref().is_none_or(|(_, b, _)| score > *b) {
            best = Some((epoch, score, model.store().clone()));
            if let Some(r) = run {
                let labels: serde_json::Map<String, serde_json::Value> =
                    tasks.iter().map(|t| (t.name.clone(), serde_json::json!(t.labels))).collect();
                let mut ck = model.to_checkpoint((epoch + 1) as u64);
                ck.meta = serde_json::json!({ "phase": "finetune", "epoch": epoch, "score": score, "labels": labels });
                ck.save(r.checkpoints().join("best.ckpt"))?;
            }
        }
        epochs.push(EpochMetrics { epoch, reports, score });
    }
    let (best_epoch, best_score, store) = best.expect("at least one epoch");
    *model.store_mut() = store;
    if let Some(r) = run {
        for rep in &epochs[best_epoch].reports {
            write_json(&r.metrics().join(format!("{}.json", rep.task)), rep)?;
        }
        write_json(&r.metrics().join("epochs.json"), &epochs)?;
    }
    Ok(FinetuneReport {
        history,
        epochs,
        best_epoch,
        best_score,
    })
}
