//! Dataset directories: `dataset.json` plus one session directory each.

use std::fs;
use std::path::{Path, PathBuf};

use eegfm::eegdata::{load_session, save_session, synth_session, Session, SynthSpec, TaskCategory};
use serde::{Deserialize, Serialize};

use crate::cli::GenData;
use crate::{Failure, Outcome};

pub const DATASET_FILE: &str = "dataset.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetEntry {
    /// Session directory relative to the dataset root.
    pub path: String,
    pub class_label: Option<usize>,
    pub task_category: String,
    pub channels: usize,
    pub n_samples: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub sessions: Vec<DatasetEntry>,
}

/// Electrode ids spread over the standard set.
fn channel_ids(n: usize) -> Vec<usize> {
    (0..n).map(|i| (3 * i + 1) % 90).collect()
}

pub fn generate(args: &GenData, root: &Path) -> Outcome<DatasetManifest> {
    if args.classes < 1 || args.first_class + args.classes > eegfm::eegdata::num_classes() {
        return Err(Failure::Validation(format!(
            "classes {}..{} outside the {} synthetic classes",
            args.first_class,
            args.first_class + args.classes,
            eegfm::eegdata::num_classes()
        )));
    }
    if args.sessions == 0 || args.channels == 0 || args.channels > 30 || args.duration == 0 {
        return Err(Failure::Validation("sessions, duration and channels (≤ 30) must be positive".into()));
    }
    let mut entries = Vec::with_capacity(args.sessions);
    for i in 0..args.sessions {
        let class = args.first_class + i % args.classes;
        let mut spec = SynthSpec::new(class, channel_ids(args.channels), args.duration, eegfm::params::derive_seed(args.seed, i as u64));
        spec.snr_db = Some(args.snr_db);
        spec.task_category = TaskCategory::from_index(class % TaskCategory::COUNT)?;
        let session = synth_session(&spec)?;
        let rel = format!("sessions/session-{i:04}");
        save_session(&session, root.join(&rel))?;
        entries.push(DatasetEntry {
            path: rel,
            class_label: session.class_label,
            task_category: session.task_category.as_str().to_string(),
            channels: session.n_channels(),
            n_samples: session.n_samples(),
        });
    }
    let manifest = DatasetManifest {
        version: 1,
        sessions: entries,
    };
    eegfm::train::write_json(&root.join(DATASET_FILE), &manifest)?;
    Ok(manifest)
}

pub fn load(root: &Path) -> Outcome<Vec<Session>> {
    let path: PathBuf = root.join(DATASET_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Failure::Validation(format!("dataset {}: {e}", path.display())))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Failure::Validation(format!("dataset {}: {e}", path.display())))?;
    if manifest.sessions.is_empty() {
        return Err(Failure::Validation(format!("dataset {} lists no sessions", root.display())));
    }
    manifest
        .sessions
        .iter()
        .map(|e| load_session(root.join(&e.path)).map_err(Failure::from))
        .collect()
}
