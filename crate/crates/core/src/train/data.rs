//! Sessions cut into fixed-length training windows.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eegdata::{patchify, PatchBatch, Session};
use crate::error::{Error, Result};

/// Patchified sessions for self-supervised pretraining.
#[derive(Debug, Clone)]
pub struct Corpus {
    recordings: Vec<PatchBatch>,
}

impl Corpus {
    pub fn from_sessions(sessions: &[Session]) -> Result<Self> {
        if sessions.is_empty() {
            return Err(Error::InvalidInput("empty corpus".into()));
        }
        Ok(Corpus {
            recordings: sessions.iter().map(patchify).collect::<Result<_>>()?,
        })
    }

    pub fn len(&self) -> usize {
        self.recordings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recordings.is_empty()
    }

    /// `batch` windows of `window` steps, each from a uniformly drawn
    /// recording at a uniformly drawn offset.
    pub fn sample_batch(&self, rng: &mut impl Rng, batch: usize, window: usize) -> Result<PatchBatch> {
        let parts = (0..batch)
            .map(|_| {
                let rec = &self.recordings[rng.random_range(0..self.recordings.len())];
                let t = rec.time_steps();
                if t < window {
                    return Err(Error::Config(format!("window {window} longer than a {t}-step recording")));
                }
                let t0 = rng.random_range(0..=t - window);
                rec.time_window(t0, window)
            })
            .collect::<Result<Vec<_>>>()?;
        PatchBatch::collate(&parts)
    }
}

/// Labelled windows of one downstream task, split by session.
#[derive(Debug, Clone)]
pub struct DownstreamTask {
    pub name: String,
    /// Original label of each class index.
    pub labels: Vec<usize>,
    pub train: Vec<(PatchBatch, usize)>,
    pub val: Vec<(PatchBatch, usize)>,
}

/// Non-overlapping `window`-step windows of one patchified session.
pub fn session_windows(session: &Session, window: usize) -> Result<Vec<PatchBatch>> {
    let rec = patchify(session)?;
    let n = rec.time_steps() / window;
    if n == 0 {
        return Err(Error::Config(format!(
            "window {window} longer than a {}-step session",
            rec.time_steps()
        )));
    }
    (0..n).map(|i| rec.time_window(i * window, window)).collect()
}

impl DownstreamTask {
    /// Cuts every session into non-overlapping windows. Per class, a seeded
    /// `val_fraction` of sessions (at least one) goes to validation, so no
    /// session contributes to both splits.
    pub fn from_sessions(name: &str, sessions: &[Session], window: usize, val_fraction: f64, seed: u64) -> Result<Self> {
        let mut by_label: BTreeMap<usize, Vec<&Session>> = BTreeMap::new();
        for s in sessions {
            let label = s
                .class_label
                .ok_or_else(|| Error::InvalidInput(format!("task {name:?}: session without class label")))?;
            by_label.entry(label).or_default().push(s);
        }
        if by_label.len() < 2 {
            return Err(Error::Config(format!("task {name:?} needs at least 2 classes, got {}", by_label.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = by_label.keys().copied().collect();
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (class, (_, group)) in by_label.into_iter().enumerate() {
            if group.len() < 2 {
                return Err(Error::Config(format!("task {name:?}: class {class} needs ≥ 2 sessions to split")));
            }
            let mut group = group;
            group.shuffle(&mut rng);
            let n_val = ((val_fraction * group.len() as f64).round() as usize).clamp(1, group.len() - 1);
            for (i, s) in group.into_iter().enumerate() {
                let dest = if i < n_val { &mut val } else { &mut train };
                dest.extend(session_windows(s, window)?.into_iter().map(|w| (w, class)));
            }
        }
        Ok(DownstreamTask {
            name: name.to_string(),
            labels,
            train,
            val,
        })
    }

    pub fn classes(&self) -> usize {
        self.labels.len()
    }

    /// Training-split count of each class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes()];
        for (_, c) in &self.train {
            counts[*c] += 1;
        }
        counts
    }
}
