//! The full network: feature extractor, channel encoder, temporal encoder
//! with task token, decoder, pretraining head and per-task finetuning heads.
//!
//! Activations are row matrices. Patch-level rows are ordered
//! `((b·T) + t)·C + c`; per-time-step rows `b·T + t`; temporal-encoder rows
//! `b·(T+1) + j` where `j = 0` is the task token and `j = t + 1` is step `t`.
//! RoPE positions follow the temporal index everywhere.

mod checkpoint;
mod config;

use std::rc::Rc;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, Variant};

use crate::attention::{AdditiveMask, AttnGroup, Mat};
use crate::autograd::{RowPair, Tape, Var};
use crate::convfeat::{recon_reference, spectral_features, to_rows, FeatureExtractor};
use crate::eegdata::{PatchBatch, TaskCategory, NUM_ELECTRODES, PATCH_LEN};
use crate::error::{Error, Result};
use crate::masking::{build_channel_masks, build_decoder_masks, build_temporal_mask, MaskPlan, TaskKind};
use crate::nn::{CrossLayer, Linear, SelfBlock, Side};
use crate::params::{derive_seed, Bound, Init, ParamId, ParamStore, INIT_STD};

/// Downstream classification task registered on a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub classes: usize,
}

#[derive(Debug, Clone)]
struct TaskHead {
    spec: TaskSpec,
    token: ParamId,
    proj: Linear,
}

/// Batch geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub batch: usize,
    pub time_steps: usize,
    pub channels: usize,
}

impl Layout {
    pub fn of(batch: &PatchBatch) -> Self {
        Layout {
            batch: batch.batch_size(),
            time_steps: batch.time_steps(),
            channels: batch.channels(),
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.time_steps * self.channels
    }

    pub fn row(&self, b: usize, t: usize, c: usize) -> usize {
        (b * self.time_steps + t) * self.channels + c
    }

    /// Temporal-encoder row of sequence index `j` (0 = token).
    pub fn seq_row(&self, b: usize, j: usize) -> usize {
        b * (self.time_steps + 1) + j
    }
}

/// Graph nodes produced by the encoders.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub layout: Layout,
    /// Fused features `[B·T·C, D]`.
    pub features: Var,
    /// Channel-encoder output `[B·T, D]`.
    pub h_c: Var,
    /// Temporal-encoder output `[B·(T+1), D]`.
    pub h_e: Var,
    /// Tiled channel positional rows `[B·T·C, D]`.
    pub channel_pe: Var,
    patch_pos: Rc<Vec<usize>>,
    seq_pos: Rc<Vec<usize>>,
}

/// Graph nodes of one pretraining forward pass.
#[derive(Debug, Clone)]
pub struct PretrainVars {
    pub encoded: Encoded,
    /// Decoder output `[B·T·C, D]`.
    pub q_l: Var,
    /// Reconstruction `[B·T·C, 256 + 129]`.
    pub pred: Var,
    /// Task-category logits `[B, 10]`.
    pub task_logits: Var,
}

/// Plain-array result of [`Model::pretrain_forward`].
#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub pred: Array4<f64>,
    pub reference: Array4<f64>,
    pub plans: Vec<MaskPlan>,
    pub task_logits: Mat,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    features: FeatureExtractor,
    channel_pe: ParamId,
    l_c: ParamId,
    l_d: ParamId,
    task_tokens: ParamId,
    channel_blocks: Vec<(SelfBlock, CrossLayer)>,
    temporal_blocks: Vec<SelfBlock>,
    decoder_blocks: Vec<(CrossLayer, SelfBlock)>,
    head_time: Linear,
    head_freq: Linear,
    task_probe: Linear,
    cls_cross: CrossLayer,
    tasks: Vec<TaskHead>,
}

/// Width of the reconstruction target: raw patch then log-PSD.
pub const RECON_WIDTH: usize = PATCH_LEN + PATCH_LEN / 2 + 1;

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, ParamStore::new(seed))
    }

    /// Parameter count of a configuration without allocating weights.
    pub fn parameter_count(config: &ModelConfig) -> Result<usize> {
        Ok(Self::build(config.clone(), ParamStore::shapes_only())?.store.num_scalars())
    }

    fn build(config: ModelConfig, mut store: ParamStore) -> Result<Self> {
        config.validate()?;
        let attn = config.attention()?;
        let d = config.model_dim;
        let hidden = config.ffn_hidden();
        let h = config.heads;
        let s = &mut store;
        let features = FeatureExtractor::new(config.features.clone(), s, "features")?;
        let tn = Init::TruncNormal(INIT_STD);
        let channel_pe = s.add("embed.channel_pe", (NUM_ELECTRODES, attn.channel_pe_dim()), tn);
        let l_c = s.add("embed.channel_query", (1, d), tn);
        let l_d = s.add("embed.decoder_query", (NUM_ELECTRODES, d), tn);
        let task_tokens = s.add("embed.task_tokens", (TaskCategory::COUNT, d), tn);
        let channel_blocks = (0..config.channel_blocks)
            .map(|i| {
                let p = format!("channel.block{i}");
                (
                    SelfBlock::new(s, &format!("{p}.self"), d, hidden, h),
                    CrossLayer::new(s, &format!("{p}.cross"), d, Some(hidden), h),
                )
            })
            .collect();
        let temporal_blocks = (0..config.temporal_blocks)
            .map(|i| SelfBlock::new(s, &format!("temporal.block{i}"), d, hidden, h))
            .collect();
        let decoder_blocks = (0..config.decoder_blocks)
            .map(|i| {
                let p = format!("decoder.block{i}");
                (
                    CrossLayer::new(s, &format!("{p}.cross"), d, Some(hidden), h),
                    SelfBlock::new(s, &format!("{p}.self"), d, hidden, h),
                )
            })
            .collect();
        let head_time = Linear::new(s, "head.time", d, PATCH_LEN, true);
        let head_freq = Linear::new(s, "head.freq", d, RECON_WIDTH - PATCH_LEN, true);
        let task_probe = Linear::new(s, "head.task_probe", d, TaskCategory::COUNT, true);
        let cls_cross = CrossLayer::new(s, "finetune.cross", d, None, h);
        Ok(Model {
            config,
            store,
            features,
            channel_pe,
            l_c,
            l_d,
            task_tokens,
            channel_blocks,
            temporal_blocks,
            decoder_blocks,
            head_time,
            head_freq,
            task_probe,
            cls_cross,
            tasks: Vec::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn features(&self) -> &FeatureExtractor {
        &self.features
    }

    /// Adds a CLS token and projector for a downstream task; returns its index.
    pub fn register_task(&mut self, name: &str, classes: usize) -> Result<usize> {
        if classes < 2 {
            return Err(Error::Config(format!("task {name:?} needs at least 2 classes, got {classes}")));
        }
        if self.task_index(name).is_ok() {
            return Err(Error::Config(format!("task {name:?} already registered")));
        }
        let d = self.config.model_dim;
        let token = self.store.add(format!("finetune.{name}.token"), (1, d), Init::TruncNormal(INIT_STD));
        let proj = Linear::new(&mut self.store, &format!("finetune.{name}.proj"), d, classes, true);
        self.tasks.push(TaskHead {
            spec: TaskSpec {
                name: name.to_string(),
                classes,
            },
            token,
            proj,
        });
        Ok(self.tasks.len() - 1)
    }

    pub fn tasks(&self) -> Vec<TaskSpec> {
        self.tasks.iter().map(|t| t.spec.clone()).collect()
    }

    pub fn task_index(&self, name: &str) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t.spec.name == name)
            .ok_or_else(|| Error::UnregisteredTask(name.to_string()))
    }

    fn check_batch(&self, batch: &PatchBatch, plans: &[MaskPlan]) -> Result<()> {
        let (b, t, c, p) = batch.patches.dim();
        if p != PATCH_LEN {
            return Err(Error::Shape(format!("patch length {p}, expected {PATCH_LEN}")));
        }
        if b == 0 || t == 0 || c == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if batch.channel_ids.dim() != (b, c) || batch.valid_channels.len() != b || batch.task_category.len() != b {
            return Err(Error::Shape("batch metadata does not match patches".into()));
        }
        if let Some(&id) = batch.channel_ids.iter().find(|&&id| id >= NUM_ELECTRODES) {
            return Err(Error::InvalidInput(format!("channel id {id} outside the electrode set")));
        }
        if plans.len() != b {
            return Err(Error::Shape(format!("{} mask plans for batch of {b}", plans.len())));
        }
        Ok(())
    }

    /// One mask plan per sample, seeded from `(seed, b)`.
    pub fn sample_plans(batch: &PatchBatch, kind: TaskKind, seed: u64) -> Result<Vec<MaskPlan>> {
        (0..batch.batch_size())
            .map(|b| MaskPlan::sample(batch.time_steps(), batch.valid_channels[b], kind, derive_seed(seed, b as u64)))
            .collect()
    }

    /// Feature extractor, channel encoder and temporal encoder.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, batch: &PatchBatch, plans: &[MaskPlan]) -> Result<Encoded> {
        self.check_batch(batch, plans)?;
        let lay = Layout::of(batch);
        let (bs, ts, cs) = (lay.batch, lay.time_steps, lay.channels);
        let n = lay.rows();

        let raw = to_rows(&batch.patches);
        let psd = to_rows(&spectral_features(&batch.patches)?);
        let raw = tape.constant(raw);
        let psd = tape.constant(psd);
        let x = self.features.forward(tape, p, raw, psd)?;

        let ids: Vec<Option<usize>> = (0..n).map(|r| Some(batch.channel_ids[[r / (ts * cs), r % cs]])).collect();
        let e = tape.gather_rows(p[self.channel_pe], Rc::new(ids.clone()));
        let tiles = self.config.model_dim / tape.value(e).ncols();
        let e = tape.concat_cols(&vec![e; tiles]);

        let patch_pos: Rc<Vec<usize>> = Rc::new((0..n).map(|r| (r / cs) % ts + 1).collect());
        let step_pos: Rc<Vec<usize>> = Rc::new((0..bs * ts).map(|r| r % ts + 1).collect());
        let seq_pos: Rc<Vec<usize>> = Rc::new((0..bs * (ts + 1)).map(|r| r % (ts + 1)).collect());

        // Channel encoder.
        let mut self_groups = Vec::with_capacity(bs * ts);
        let mut cross_groups = Vec::with_capacity(bs * ts);
        for (b, plan) in plans.iter().enumerate() {
            let masks = build_channel_masks(plan, ts, cs, batch.valid_channels[b]);
            for (t, m) in masks.into_iter().enumerate() {
                let rows: Vec<usize> = (0..cs).map(|c| lay.row(b, t, c)).collect();
                self_groups.push(AttnGroup {
                    q_rows: rows.clone(),
                    k_rows: rows.clone(),
                    mask: m.self_mask,
                });
                cross_groups.push(AttnGroup {
                    q_rows: vec![b * ts + t],
                    k_rows: rows,
                    mask: m.cross_mask,
                });
            }
        }
        let self_groups = Rc::new(self_groups);
        let cross_groups = Rc::new(cross_groups);
        let patch_side = Side::new(patch_pos.clone(), Some(e));
        let step_side = Side::new(step_pos, None);
        let mut h = x;
        let mut l = tape.gather_rows(p[self.l_c], Rc::new(vec![Some(0); bs * ts]));
        for (sb, cl) in &self.channel_blocks {
            h = sb.apply(tape, p, h, &patch_side, self_groups.clone());
            l = cl.apply(tape, p, l, h, &step_side, &patch_side, cross_groups.clone());
        }
        let h_c = l;

        // Temporal encoder: token then time steps, per sample.
        let cats: Vec<Option<usize>> = batch.task_category.iter().map(|c| Some(c.index())).collect();
        let tok = tape.gather_rows(p[self.task_tokens], Rc::new(cats));
        let stacked = tape.concat_rows(&[tok, h_c]);
        let order: Vec<Option<usize>> = (0..bs * (ts + 1))
            .map(|r| {
                let (b, j) = (r / (ts + 1), r % (ts + 1));
                Some(if j == 0 { b } else { bs + b * ts + j - 1 })
            })
            .collect();
        let mut he = tape.gather_rows(stacked, Rc::new(order));
        let groups: Vec<AttnGroup> = plans
            .iter()
            .enumerate()
            .map(|(b, plan)| {
                let rows: Vec<usize> = (0..=ts).map(|j| lay.seq_row(b, j)).collect();
                AttnGroup {
                    q_rows: rows.clone(),
                    k_rows: rows,
                    mask: build_temporal_mask(plan, ts),
                }
            })
            .collect();
        let groups = Rc::new(groups);
        let seq_side = Side::new(seq_pos.clone(), None);
        for blk in &self.temporal_blocks {
            he = blk.apply(tape, p, he, &seq_side, groups.clone());
        }
        Ok(Encoded {
            layout: lay,
            features: x,
            h_c,
            h_e: he,
            channel_pe: e,
            patch_pos,
            seq_pos,
        })
    }

    /// Decoder over every `(t, c)` slot; returns `[B·T·C, D]`.
    pub fn decode(&self, tape: &mut Tape, p: &Bound, enc: &Encoded, batch: &PatchBatch, plans: &[MaskPlan]) -> Var {
        let lay = enc.layout;
        let (ts, cs) = (lay.time_steps, lay.channels);
        let slots = ts * cs;
        let ids: Vec<Option<usize>> = (0..lay.rows()).map(|r| Some(batch.channel_ids[[r / slots, r % cs]])).collect();
        let ld = tape.gather_rows(p[self.l_d], Rc::new(ids));
        let q0 = tape.add(ld, enc.channel_pe);
        let mut q = tape.rope(q0, enc.patch_pos.clone(), self.config.heads);

        let mut cross = Vec::with_capacity(lay.batch);
        let mut selfg = Vec::with_capacity(lay.batch);
        for (b, plan) in plans.iter().enumerate() {
            let valid = batch.valid_channels[b];
            let m = build_decoder_masks(plan, ts, cs, valid);
            let mut cm = m.cross_mask.with_leading_enabled_cols(1);
            for r in 0..slots {
                if r % cs >= valid {
                    cm.set(r, 0, false);
                }
            }
            let q_rows: Vec<usize> = (b * slots..(b + 1) * slots).collect();
            cross.push(AttnGroup {
                q_rows: q_rows.clone(),
                k_rows: (0..=ts).map(|j| lay.seq_row(b, j)).collect(),
                mask: cm,
            });
            selfg.push(AttnGroup {
                q_rows: q_rows.clone(),
                k_rows: q_rows,
                mask: m.self_mask,
            });
        }
        let cross = Rc::new(cross);
        let selfg = Rc::new(selfg);
        let slot_side = Side::new(enc.patch_pos.clone(), Some(enc.channel_pe));
        let seq_side = Side::new(enc.seq_pos.clone(), None);
        for (cl, sb) in &self.decoder_blocks {
            q = cl.apply(tape, p, q, enc.h_e, &slot_side, &seq_side, cross.clone());
            q = sb.apply(tape, p, q, &slot_side, selfg.clone());
        }
        q
    }

    /// `[Φ_t q ; Φ_f q]`, width 385.
    pub fn pretrain_head(&self, tape: &mut Tape, p: &Bound, q_l: Var) -> Var {
        let t = self.head_time.apply(tape, p, q_l);
        let f = self.head_freq.apply(tape, p, q_l);
        tape.concat_cols(&[t, f])
    }

    fn token_rows(&self, tape: &mut Tape, enc: &Encoded) -> Var {
        let lay = enc.layout;
        let rows = (0..lay.batch).map(|b| Some(lay.seq_row(b, 0))).collect();
        tape.gather_rows(enc.h_e, Rc::new(rows))
    }

    /// Linear probe on the token position: `[B, 10]`.
    pub fn task_logits(&self, tape: &mut Tape, p: &Bound, enc: &Encoded) -> Var {
        let tok = self.token_rows(tape, enc);
        self.task_probe.apply(tape, p, tok)
    }

    /// Classification logits `[B, classes]` of downstream task `task`.
    pub fn finetune_logits(&self, tape: &mut Tape, p: &Bound, enc: &Encoded, task: usize) -> Result<Var> {
        let head = self
            .tasks
            .get(task)
            .ok_or_else(|| Error::UnregisteredTask(format!("#{task}")))?;
        let lay = enc.layout;
        let q = tape.gather_rows(p[head.token], Rc::new(vec![Some(0); lay.batch]));
        let groups: Vec<AttnGroup> = (0..lay.batch)
            .map(|b| AttnGroup {
                q_rows: vec![b],
                k_rows: (0..=lay.time_steps).map(|j| lay.seq_row(b, j)).collect(),
                mask: AdditiveMask::enabled(1, lay.time_steps + 1),
            })
            .collect();
        let q_side = Side::new(Rc::new(vec![0; lay.batch]), None);
        let k_side = Side::new(enc.seq_pos.clone(), None);
        let f = self.cls_cross.apply(tape, p, q, enc.h_e, &q_side, &k_side, Rc::new(groups));
        Ok(head.proj.apply(tape, p, f))
    }

    /// Encoder, decoder, reconstruction head and task probe.
    pub fn pretrain_graph(&self, tape: &mut Tape, p: &Bound, batch: &PatchBatch, plans: &[MaskPlan]) -> Result<PretrainVars> {
        let encoded = self.encode(tape, p, batch, plans)?;
        let q_l = self.decode(tape, p, &encoded, batch, plans);
        let pred = self.pretrain_head(tape, p, q_l);
        let task_logits = self.task_logits(tape, p, &encoded);
        Ok(PretrainVars {
            encoded,
            q_l,
            pred,
            task_logits,
        })
    }

    /// Runs the pretraining pipeline for one task kind without recording
    /// gradients of interest.
    pub fn pretrain_forward(&self, batch: &PatchBatch, kind: TaskKind, seed: u64) -> Result<PretrainOutput> {
        let plans = Self::sample_plans(batch, kind, seed)?;
        self.pretrain_forward_with(batch, &plans)
    }

    pub fn pretrain_forward_with(&self, batch: &PatchBatch, plans: &[MaskPlan]) -> Result<PretrainOutput> {
        let mut tape = Tape::new();
        let p = self.store.bind_constant(&mut tape);
        let vars = self.pretrain_graph(&mut tape, &p, batch, plans)?;
        let (b, t, c, _) = batch.patches.dim();
        let pred = tape
            .value(vars.pred)
            .clone()
            .into_shape_with_order((b, t, c, RECON_WIDTH))
            .expect("row layout");
        Ok(PretrainOutput {
            pred,
            reference: reference(batch)?,
            plans: plans.to_vec(),
            task_logits: tape.value(vars.task_logits).clone(),
        })
    }

    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            tasks: self.tasks(),
            step,
            meta: serde_json::Value::Null,
            tensors: self
                .store
                .entries()
                .iter()
                .map(|e| TensorEntry {
                    path: e.path.clone(),
                    value: e.value.clone(),
                })
                .collect(),
        }
    }

    /// Rebuilds a model from a checkpoint; tensors whose path is not a model
    /// parameter (optimizer state) are ignored.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut model = Model::new(ck.config.clone(), 0)?;
        for t in &ck.tasks {
            model.register_task(&t.name, t.classes)?;
        }
        let mut seen = 0;
        for t in &ck.tensors {
            if let Some(id) = model.store.id_of(&t.path) {
                model.store.set(id, t.value.clone())?;
                seen += 1;
            }
        }
        if seen != model.store.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {seen} of {} model parameters",
                model.store.len()
            )));
        }
        Ok(model)
    }
}

/// Reconstruction reference `[B, T, C, 385]` of a batch.
pub fn reference(batch: &PatchBatch) -> Result<Array4<f64>> {
    recon_reference(&batch.patches, &spectral_features(&batch.patches)?)
}

/// Row pairs `(prediction, target)` scored by the reconstruction loss.
///
/// GPT pairs slot `(t, c)` with reference `(t+1, c)`; MAE pairs every masked
/// slot with itself.
pub fn loss_pairs(layout: Layout, plans: &[MaskPlan], valid: &[usize]) -> Vec<RowPair> {
    let mut pairs = Vec::new();
    for (b, plan) in plans.iter().enumerate() {
        match plan.kind {
            TaskKind::Gpt => {
                for t in 0..layout.time_steps.saturating_sub(1) {
                    for c in 0..valid[b] {
                        pairs.push((layout.row(b, t, c), layout.row(b, t + 1, c)));
                    }
                }
            }
            _ => {
                for (t, c) in plan.masked_positions(layout.time_steps, valid[b]) {
                    let r = layout.row(b, t, c);
                    pairs.push((r, r));
                }
            }
        }
    }
    pairs
}

/// Every valid slot paired with itself.
pub fn all_pairs(layout: Layout, valid: &[usize]) -> Vec<RowPair> {
    (0..layout.batch)
        .flat_map(|b| {
            (0..layout.time_steps).flat_map(move |t| (0..valid[b]).map(move |c| (b, t, c)))
        })
        .map(|(b, t, c)| {
            let r = layout.row(b, t, c);
            (r, r)
        })
        .collect()
}

/// Reference rows `[B·T·C, 385]`.
pub fn reference_rows(batch: &PatchBatch) -> Result<Array2<f64>> {
    Ok(to_rows(&reference(batch)?))
}
