//! Fixtures shared by the benchmarks.

use eegfm::eegdata::{patchify, synth_session, PatchBatch, SynthSpec};

/// `batch` synthetic windows of `time_steps` one-second patches over
/// `channels` electrodes.
pub fn synth_batch(batch: usize, time_steps: usize, channels: usize) -> PatchBatch {
    let ids: Vec<usize> = (0..channels).map(|i| 3 * i + 1).collect();
    let parts: Vec<PatchBatch> = (0..batch)
        .map(|b| {
            let spec = SynthSpec::new(b % 3, ids.clone(), time_steps, b as u64);
            patchify(&synth_session(&spec).unwrap()).unwrap()
        })
        .collect();
    PatchBatch::collate(&parts).unwrap()
}
