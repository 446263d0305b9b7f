//! Analytic gradients against central finite differences.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pretrain::pretrain_loss;
use crate::autograd::Tape;
use crate::eegdata::PatchBatch;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::masking::{MaskPlan, TaskKind};
use crate::model::Model;
use crate::params::ParamId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub n_params: usize,
    pub step: f64,
    pub tol: f64,
    pub seed: u64,
    pub kind: TaskKind,
    /// Test fixture: scales the analytic gradient of this parameter by 1.5,
    /// standing in for a broken backward pass.
    pub corrupt: Option<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            n_params: 50,
            step: 1e-5,
            tol: 1e-4,
            seed: 0,
            kind: TaskKind::MaeTp,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub path: String,
    pub index: [usize; 2],
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub worst_path: String,
    pub passed: bool,
}

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Objective: the pretraining loss of `plans` plus the cross-entropy of every
/// registered downstream head, so that every module receives gradient.
fn objective(model: &Model, batch: &PatchBatch, plans: &[MaskPlan], with_grads: bool) -> Result<(f64, Option<Vec<Option<crate::attention::Mat>>>)> {
    let mut tape = Tape::new();
    let p = model.store().bind(&mut tape);
    let loss = pretrain_loss(model, &mut tape, &p, batch, plans, &LossWeights::default())?;
    let mut terms = vec![(loss.total, 1.0)];
    if !model.tasks().is_empty() {
        let unmasked = vec![MaskPlan::unmasked(); batch.batch_size()];
        let enc = model.encode(&mut tape, &p, batch, &unmasked)?;
        for (i, t) in model.tasks().iter().enumerate() {
            let logits = model.finetune_logits(&mut tape, &p, &enc, i)?;
            let labels = (0..batch.batch_size()).map(|b| b % t.classes).collect();
            terms.push((tape.cross_entropy(logits, Rc::new(labels), None), 1.0));
        }
    }
    let total = tape.weighted_sum(&terms);
    let value = tape.scalar(total);
    if !with_grads {
        return Ok((value, None));
    }
    let grads = tape.backward(total);
    Ok((value, Some(super::collect_grads(model.store(), &p, &grads))))
}

/// Module of a parameter path: its first dotted component.
fn module_of(path: &str) -> &str {
    path.split('.').next().unwrap_or(path)
}

/// Samples `n_params` scalar parameters round-robin over modules (size
/// weighted within a module) and compares gradients.
pub fn grad_check(model: &Model, batch: &PatchBatch, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.n_params == 0 || !(cfg.step > 0.0) {
        return Err(Error::Config("grad check needs n_params ≥ 1 and a positive step".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let plans = Model::sample_plans(batch, cfg.kind, rng.random())?;
    let mut work = model.clone();
    let (_, grads) = objective(&work, batch, &plans, true)?;
    let grads = grads.expect("requested");

    let mut modules: BTreeMap<&str, Vec<ParamId>> = BTreeMap::new();
    for id in model.store().ids() {
        modules.entry(module_of(model.store().path(id))).or_default().push(id);
    }
    let modules: Vec<Vec<ParamId>> = modules.into_values().collect();
    let corrupt_id = match &cfg.corrupt {
        Some(path) => Some(
            model
                .store()
                .id_of(path)
                .ok_or_else(|| Error::Config(format!("unknown parameter {path:?}")))?,
        ),
        None => None,
    };

    let mut picks: Vec<(ParamId, usize)> = Vec::with_capacity(cfg.n_params + 1);
    for i in 0..cfg.n_params {
        let ids = &modules[i % modules.len()];
        let sizes: Vec<usize> = ids.iter().map(|&id| model.store().get(id).len()).collect();
        let mut r = rng.random_range(0..sizes.iter().sum::<usize>());
        let mut j = 0;
        while r >= sizes[j] {
            r -= sizes[j];
            j += 1;
        }
        picks.push((ids[j], r));
    }
    if let Some(id) = corrupt_id {
        let n = model.store().get(id).len();
        picks.push((id, rng.random_range(0..n)));
    }

    let mut entries = Vec::with_capacity(picks.len());
    for (id, flat) in picks {
        let cols = model.store().get(id).ncols();
        let (r, c) = (flat / cols, flat % cols);
        let base = work.store().get(id)[[r, c]];
        work.store_mut().get_mut(id)[[r, c]] = base + cfg.step;
        let (lp, _) = objective(&work, batch, &plans, false)?;
        work.store_mut().get_mut(id)[[r, c]] = base - cfg.step;
        let (lm, _) = objective(&work, batch, &plans, false)?;
        work.store_mut().get_mut(id)[[r, c]] = base;
        let numeric = (lp - lm) / (2.0 * cfg.step);
        let mut analytic = grads[id.index()].as_ref().map_or(0.0, |g| g[[r, c]]);
        if Some(id) == corrupt_id {
            analytic *= 1.5;
        }
        entries.push(GradCheckEntry {
            path: model.store().path(id).to_string(),
            index: [r, c],
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    let worst = entries
        .iter()
        .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
        .expect("at least one entry");
    let max_rel_err = worst.rel_err;
    let worst_path = worst.path.clone();
    Ok(GradCheckReport {
        passed: max_rel_err < cfg.tol,
        entries,
        max_rel_err,
        worst_path,
    })
}
