//! Sessions, normalization, patching, synthetic data and session files.

mod electrodes;
mod io;
mod session;
mod synth;

pub use electrodes::{ElectrodeSet, LABELS as ELECTRODE_LABELS, NUM_ELECTRODES};
pub use io::{load_session, save_session, MANIFEST_FILE, PAYLOAD_FILE, SESSION_VERSION};
pub use session::{
    patchify, znormalize, PatchBatch, Session, TaskCategory, PATCH_LEN, SAMPLE_RATE, ZNORM_EPS,
};
pub use synth::{channel_gain, num_classes, synth_session, SynthSpec, CLASS_PEAKS_HZ};
