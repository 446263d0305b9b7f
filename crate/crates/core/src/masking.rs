//! Masked-set sampling and the attention masks of every module.
//!
//! A patch `(t, c)` is masked when `t ∈ Ω_T` or `c ∈ Ω_C`. Masked patches
//! are never readable as keys, so their content can only ever reach the loss
//! as a reconstruction target.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AdditiveMask;
use crate::error::{Error, Result};

pub const TIME_MASK_RATIO: f64 = 0.4;
pub const CHANNEL_MASK_RATIO: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Gpt,
    MaeTp,
    MaeCh,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Gpt, TaskKind::MaeTp, TaskKind::MaeCh];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Gpt => "gpt",
            TaskKind::MaeTp => "mae-tp",
            TaskKind::MaeCh => "mae-ch",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "gpt" => Ok(TaskKind::Gpt),
            "mae-tp" => Ok(TaskKind::MaeTp),
            "mae-ch" => Ok(TaskKind::MaeCh),
            other => Err(Error::Mask(format!("unknown task kind {other:?}"))),
        }
    }
}

/// Masked sets of one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub kind: TaskKind,
    /// Sorted masked time steps.
    pub omega_t: Vec<usize>,
    /// Sorted masked channel slots.
    pub omega_c: Vec<usize>,
}

fn masked_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).round() as usize).clamp(1, n - 1)
}

fn sorted_sample(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut v = sample(rng, n, k).into_vec();
    v.sort_unstable();
    v
}

impl MaskPlan {
    /// Plan with nothing masked and no causal structure, used for the
    /// finetuning reconstruction pass and for classification.
    pub fn unmasked() -> Self {
        MaskPlan {
            kind: TaskKind::MaeCh,
            omega_t: Vec::new(),
            omega_c: Vec::new(),
        }
    }

    /// Samples masked sets; `channels` counts valid (non-padded) slots only.
    pub fn sample(time_steps: usize, channels: usize, kind: TaskKind, seed: u64) -> Result<Self> {
        if time_steps == 0 || channels == 0 {
            return Err(Error::Mask(format!("need T ≥ 1 and C ≥ 1, got T={time_steps}, C={channels}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (omega_t, omega_c) = match kind {
            TaskKind::Gpt => (Vec::new(), Vec::new()),
            TaskKind::MaeTp => {
                if time_steps < 2 {
                    return Err(Error::Mask("MAE-TP needs T ≥ 2".into()));
                }
                let k = masked_count(time_steps, TIME_MASK_RATIO);
                (sorted_sample(&mut rng, time_steps, k), Vec::new())
            }
            TaskKind::MaeCh => {
                if channels < 2 {
                    return Err(Error::Mask("MAE-CH needs C ≥ 2".into()));
                }
                let k = masked_count(channels, CHANNEL_MASK_RATIO);
                (Vec::new(), sorted_sample(&mut rng, channels, k))
            }
        };
        Ok(MaskPlan { kind, omega_t, omega_c })
    }

    pub fn is_masked(&self, t: usize, c: usize) -> bool {
        self.omega_t.binary_search(&t).is_ok() || self.omega_c.binary_search(&c).is_ok()
    }

    pub fn time_masked(&self, t: usize) -> bool {
        self.omega_t.binary_search(&t).is_ok()
    }

    /// Every masked `(t, c)` among `valid` channel slots.
    pub fn masked_positions(&self, time_steps: usize, valid: usize) -> Vec<(usize, usize)> {
        (0..time_steps)
            .flat_map(|t| (0..valid).map(move |c| (t, c)))
            .filter(|&(t, c)| self.is_masked(t, c))
            .collect()
    }
}

/// Channel-encoder masks for one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMasks {
    /// `[C, C]`: channel queries over channel keys.
    pub self_mask: AdditiveMask,
    /// `[1, C]`: the compression query over channel keys.
    pub cross_mask: AdditiveMask,
}

pub fn build_channel_masks(plan: &MaskPlan, time_steps: usize, channels: usize, valid: usize) -> Vec<ChannelMasks> {
    (0..time_steps)
        .map(|t| {
            let key_ok = |c: usize| c < valid && !plan.is_masked(t, c);
            ChannelMasks {
                self_mask: AdditiveMask::from_fn(channels, channels, |i, j| i < valid && key_ok(j)),
                cross_mask: AdditiveMask::from_fn(1, channels, |_, j| key_ok(j)),
            }
        })
        .collect()
}

/// `[(T+1), (T+1)]` mask; position 0 is the task token.
pub fn build_temporal_mask(plan: &MaskPlan, time_steps: usize) -> AdditiveMask {
    let n = time_steps + 1;
    match plan.kind {
        TaskKind::Gpt => AdditiveMask::from_fn(n, n, |i, j| j <= i),
        TaskKind::MaeTp | TaskKind::MaeCh => {
            AdditiveMask::from_fn(n, n, |i, j| j == 0 || i == j || !plan.time_masked(j - 1))
        }
    }
}

/// Decoder masks over slots `t·C + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderMasks {
    /// `[T·C, T]`: slots over encoder time steps (token column excluded).
    pub cross_mask: AdditiveMask,
    /// `[T·C, T·C]`.
    pub self_mask: AdditiveMask,
}

pub fn build_decoder_masks(plan: &MaskPlan, time_steps: usize, channels: usize, valid: usize) -> DecoderMasks {
    let n = time_steps * channels;
    let slot = |r: usize| (r / channels, r % channels);
    let cross_mask = AdditiveMask::from_fn(n, time_steps, |r, k| {
        let (t, c) = slot(r);
        c < valid
            && match plan.kind {
                TaskKind::Gpt => k <= t,
                _ => !plan.time_masked(k),
            }
    });
    let self_mask = AdditiveMask::from_fn(n, n, |r, k| {
        let (t, c) = slot(r);
        let (tk, ck) = slot(k);
        if c >= valid || ck >= valid {
            return false;
        }
        match plan.kind {
            TaskKind::Gpt => tk <= t,
            _ => plan.is_masked(t, c) || !plan.is_masked(tk, ck),
        }
    });
    DecoderMasks { cross_mask, self_mask }
}
