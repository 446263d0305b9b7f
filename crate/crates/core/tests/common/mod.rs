#![allow(dead_code)]

use eegfm::eegdata::{synth_session, PatchBatch, Session, SynthSpec, TaskCategory, NUM_ELECTRODES, PATCH_LEN};
use ndarray::{Array2, Array4};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

/// Random patches with distinct electrode ids; when `ragged`, samples get
/// between 2 and `c` valid channels and the rest is zero padding.
pub fn random_batch(rng: &mut impl Rng, b: usize, t: usize, c: usize, ragged: bool) -> PatchBatch {
    let mut patches = Array4::<f64>::zeros((b, t, c, PATCH_LEN));
    let mut ids = Array2::<usize>::zeros((b, c));
    let mut valid = Vec::with_capacity(b);
    for bi in 0..b {
        let v = if ragged { rng.random_range(2.min(c)..=c) } else { c };
        for (ci, id) in sample(rng, NUM_ELECTRODES, v).into_iter().enumerate() {
            ids[[bi, ci]] = id;
            for ti in 0..t {
                for p in 0..PATCH_LEN {
                    patches[[bi, ti, ci, p]] = rng.sample(StandardNormal);
                }
            }
        }
        valid.push(v);
    }
    PatchBatch {
        patches,
        channel_ids: ids,
        task_category: (0..b).map(|i| TaskCategory::from_index(i % TaskCategory::COUNT).unwrap()).collect(),
        class_label: vec![None; b],
        valid_channels: valid,
    }
}

/// Adds fresh noise to the patch at `(b, t, c)`.
pub fn perturb(rng: &mut impl Rng, batch: &mut PatchBatch, b: usize, t: usize, c: usize) {
    for p in 0..PATCH_LEN {
        let n: f64 = rng.sample(StandardNormal);
        batch.patches[[b, t, c, p]] += 1.0 + n;
    }
}

pub const DESK_CHANNELS: [usize; 8] = [1, 4, 7, 10, 13, 16, 19, 22];

/// `sessions` 30-second sessions of each class, eight channels; the task
/// category follows the class so the task-token objective has signal.
pub fn synth_corpus(classes: &[usize], sessions: usize, seed: u64) -> Vec<Session> {
    let mut out = Vec::with_capacity(classes.len() * sessions);
    for &class in classes {
        for s in 0..sessions {
            let mut spec = SynthSpec::new(class, DESK_CHANNELS.to_vec(), 30, seed + 1000 * class as u64 + s as u64);
            spec.task_category = TaskCategory::from_index(class % TaskCategory::COUNT).unwrap();
            out.push(synth_session(&spec).unwrap());
        }
    }
    out
}
