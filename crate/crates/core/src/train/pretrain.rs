use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Corpus;
use super::optim::{clip_global_norm, AdamW, AdamWConfig, StepOutcome};
use super::schedule::{ScheduleConfig, PRETRAIN_PEAK_LR, WARMUP_FRACTION};
use super::{collect_grads, optimizer_from_checkpoint, optimizer_tensors, RunDir, StepLog, StepLogWriter};
use crate::autograd::{Tape, Var};
use crate::eegdata::{PatchBatch, PATCH_LEN};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::masking::{MaskPlan, TaskKind};
use crate::model::{loss_pairs, reference_rows, Checkpoint, Layout, Model};
use crate::params::{derive_seed, Bound};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Time steps per training window.
    pub window: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_fraction: f64,
    pub optim: AdamWConfig,
    pub clip_norm: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 300,
            batch_size: 8,
            window: 6,
            peak_lr: PRETRAIN_PEAK_LR,
            min_lr: 0.0,
            warmup_fraction: WARMUP_FRACTION,
            optim: AdamWConfig::default(),
            clip_norm: 1.0,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl PretrainConfig {
    pub fn schedule(&self) -> Result<ScheduleConfig> {
        ScheduleConfig::with_warmup_fraction(self.peak_lr, self.steps, self.warmup_fraction, self.min_lr)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        self.weights.validate()?;
        if self.batch_size == 0 || self.window < 2 {
            return Err(Error::Config("batch size must be ≥ 1 and window ≥ 2".into()));
        }
        Ok(())
    }
}

/// Scalar nodes of the pretraining objective.
#[derive(Debug, Clone, Copy)]
pub struct PretrainLoss {
    pub total: Var,
    pub reconstruction: Var,
    pub task: Var,
}

/// `λ_kind · L_rec + λ_4 · L_DT` for a batch carrying one task kind.
pub fn pretrain_loss(
    model: &Model,
    tape: &mut Tape,
    p: &Bound,
    batch: &PatchBatch,
    plans: &[MaskPlan],
    weights: &LossWeights,
) -> Result<PretrainLoss> {
    let kind = plans.first().map(|pl| pl.kind).ok_or_else(|| Error::InvalidInput("no mask plans".into()))?;
    let vars = model.pretrain_graph(tape, p, batch, plans)?;
    let pairs = loss_pairs(Layout::of(batch), plans, &batch.valid_channels);
    if pairs.is_empty() {
        return Err(Error::InvalidInput(format!("{kind} batch has no scored patches")));
    }
    let target = Rc::new(reference_rows(batch)?);
    let rec = tape.patch_rmse(vars.pred, target, Rc::new(pairs), PATCH_LEN);
    let labels = batch.task_category.iter().map(|c| c.index()).collect();
    let dt = tape.cross_entropy(vars.task_logits, Rc::new(labels), None);
    let total = tape.weighted_sum(&[(rec, weights.reconstruction(kind)), (dt, weights.task)]);
    Ok(PretrainLoss {
        total,
        reconstruction: rec,
        task: dt,
    })
}

/// Task kind of a pretraining step: GPT, MAE-TP, MAE-CH in turn.
pub fn kind_at(step: usize) -> TaskKind {
    TaskKind::ALL[step % TaskKind::ALL.len()]
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub history: Vec<StepLog>,
}

impl PretrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|h| h.loss).collect()
    }
}

/// Optimizer and position of a pretraining run, for resuming.
#[derive(Debug, Clone)]
pub struct PretrainState {
    pub optimizer: AdamW,
    pub next_step: usize,
}

impl PretrainState {
    pub fn fresh(model: &Model, cfg: &PretrainConfig) -> Self {
        PretrainState {
            optimizer: AdamW::new(cfg.optim, model.store()),
            next_step: 0,
        }
    }

    /// Rebuilds model and optimizer from a checkpoint written by [`pretrain`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Model, Self)> {
        let model = Model::from_checkpoint(ck)?;
        let optimizer = optimizer_from_checkpoint(ck, model.store())?;
        Ok((
            model,
            PretrainState {
                optimizer,
                next_step: ck.step as usize,
            },
        ))
    }
}

fn checkpoint(model: &Model, state: &PretrainState, step: usize) -> Checkpoint {
    let mut ck = model.to_checkpoint(step as u64);
    ck.tensors.extend(optimizer_tensors(&state.optimizer, model.store()));
    ck.meta = serde_json::json!({
        "phase": "pretrain",
        "optimizer_step": state.optimizer.step,
        "optimizer": state.optimizer.config,
    });
    ck
}

/// Runs steps `state.next_step .. cfg.steps`.
pub fn pretrain(
    model: &mut Model,
    corpus: &Corpus,
    cfg: &PretrainConfig,
    state: &mut PretrainState,
    run: Option<&RunDir>,
) -> Result<PretrainReport> {
    cfg.validate()?;
    let schedule = cfg.schedule()?;
    state.optimizer.sync(model.store());
    let mut log = match run {
        Some(r) => Some(StepLogWriter::open(&r.steps_log(), state.next_step > 0)?),
        None => None,
    };
    let mut history = Vec::new();
    for step in state.next_step..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, step as u64));
        let kind = kind_at(step);
        let batch = corpus.sample_batch(&mut rng, cfg.batch_size, cfg.window)?;
        let plans = Model::sample_plans(&batch, kind, rng.random())?;

        let mut tape = Tape::new();
        let p = model.store().bind(&mut tape);
        let loss = pretrain_loss(model, &mut tape, &p, &batch, &plans, &cfg.weights)?;
        let grads = tape.backward(loss.total);
        let mut g = collect_grads(model.store(), &p, &grads);
        let grad_norm = clip_global_norm(&mut g, cfg.clip_norm);
        let lr = schedule.lr_at(step + 1);
        let outcome = state.optimizer.step(model.store_mut(), &g, lr)?;

        let entry = StepLog {
            step,
            task: kind.to_string(),
            loss: tape.scalar(loss.total),
            reconstruction: tape.scalar(loss.reconstruction),
            task_token: tape.scalar(loss.task),
            classification: None,
            lr,
            grad_norm,
            skipped: outcome == StepOutcome::SkippedNonFinite,
        };
        if let Some(w) = log.as_mut() {
            w.write(&entry)?;
        }
        history.push(entry);
        state.next_step = step + 1;

        if let Some(r) = run {
            let done = step + 1;
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                checkpoint(model, state, done).save(r.checkpoints().join(format!("step-{done:06}.ckpt")))?;
            }
        }
    }
    if let Some(r) = run {
        checkpoint(model, state, state.next_step).save(r.checkpoints().join("last.ckpt"))?;
    }
    Ok(PretrainReport { history })
}
