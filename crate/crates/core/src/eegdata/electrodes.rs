//! The fixed 90-position electrode vocabulary.
//!
//! 86 positions of the extended 10-10 system plus T1, T2, A1 and A2. The
//! index of a label is its position in [`LABELS`] and is what every
//! channel-id array in the crate refers to.

use std::collections::HashMap;
use std::sync::OnceLock;

use crate::error::{Error, Result};

pub const NUM_ELECTRODES: usize = 90;

#[rustfmt::skip]
pub const LABELS: [&str; NUM_ELECTRODES] = [
    "Fp1", "Fpz", "Fp2",
    "AF9", "AF7", "AF5", "AF3", "AF1", "AFz", "AF2", "AF4", "AF6", "AF8", "AF10",
    "F9", "F7", "F5", "F3", "F1", "Fz", "F2", "F4", "F6", "F8", "F10",
    "FT9", "FT7", "FC5", "FC3", "FC1", "FCz", "FC2", "FC4", "FC6", "FT8", "FT10",
    "T9", "T7", "C5", "C3", "C1", "Cz", "C2", "C4", "C6", "T8", "T10",
    "TP9", "TP7", "CP5", "CP3", "CP1", "CPz", "CP2", "CP4", "CP6", "TP8", "TP10",
    "P9", "P7", "P5", "P3", "P1", "Pz", "P2", "P4", "P6", "P8", "P10",
    "PO9", "PO7", "PO5", "PO3", "PO1", "POz", "PO2", "PO4", "PO6", "PO8", "PO10",
    "O1", "Oz", "O2",
    "I1", "Iz", "I2",
    "T1", "T2", "A1", "A2",
];

/// Old 10-20 names that map onto 10-10 positions.
const LEGACY_ALIASES: [(&str, &str); 4] = [("T3", "T7"), ("T4", "T8"), ("T5", "P7"), ("T6", "P8")];

/// Ordered electrode labels with a label → index lookup.
#[derive(Debug)]
pub struct ElectrodeSet {
    index: HashMap<String, usize>,
}

impl ElectrodeSet {
    /// The process-wide electrode set.
    pub fn standard() -> &'static ElectrodeSet {
        static SET: OnceLock<ElectrodeSet> = OnceLock::new();
        SET.get_or_init(|| {
            let mut index: HashMap<String, usize> = LABELS
                .iter()
                .enumerate()
                .map(|(i, l)| (l.to_ascii_lowercase(), i))
                .collect();
            for (alias, target) in LEGACY_ALIASES {
                let id = index[&target.to_ascii_lowercase()];
                index.insert(alias.to_ascii_lowercase(), id);
            }
            ElectrodeSet { index }
        })
    }

    pub fn len(&self) -> usize {
        NUM_ELECTRODES
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn names(&self) -> &'static [&'static str] {
        &LABELS
    }

    /// Case-insensitive lookup; accepts the legacy T3/T4/T5/T6 names.
    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.index
            .get(&label.trim().to_ascii_lowercase())
            .copied()
            .ok_or_else(|| Error::UnknownElectrode(label.to_string()))
    }

    pub fn label(&self, id: usize) -> Result<&'static str> {
        LABELS
            .get(id)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("electrode id {id} out of range")))
    }
}
