use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use super::electrodes::NUM_ELECTRODES;
use crate::error::{Error, Result};

/// Fixed sampling rate of every session, in Hz.
pub const SAMPLE_RATE: u32 = 256;
/// Samples per patch (one second).
pub const PATCH_LEN: usize = SAMPLE_RATE as usize;
/// Divisor guard in z-score normalization.
pub const ZNORM_EPS: f64 = 1e-5;

/// Experimental-paradigm category of a recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskCategory {
    EmotionRecognition,
    MotorImagery,
    MotorExecution,
    SeizureDetection,
    ArtifactClassification,
    SleepStaging,
    Resting,
    Erp,
    VisualStimulus,
    WorkloadEstimation,
}

impl TaskCategory {
    pub const COUNT: usize = 10;

    pub const ALL: [TaskCategory; Self::COUNT] = [
        TaskCategory::EmotionRecognition,
        TaskCategory::MotorImagery,
        TaskCategory::MotorExecution,
        TaskCategory::SeizureDetection,
        TaskCategory::ArtifactClassification,
        TaskCategory::SleepStaging,
        TaskCategory::Resting,
        TaskCategory::Erp,
        TaskCategory::VisualStimulus,
        TaskCategory::WorkloadEstimation,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("task category index {i} out of range")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskCategory::EmotionRecognition => "emotion_recognition",
            TaskCategory::MotorImagery => "motor_imagery",
            TaskCategory::MotorExecution => "motor_execution",
            TaskCategory::SeizureDetection => "seizure_detection",
            TaskCategory::ArtifactClassification => "artifact_classification",
            TaskCategory::SleepStaging => "sleep_staging",
            TaskCategory::Resting => "resting",
            TaskCategory::Erp => "erp",
            TaskCategory::VisualStimulus => "visual_stimulus",
            TaskCategory::WorkloadEstimation => "workload_estimation",
        }
    }
}

impl fmt::Display for TaskCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::UnknownTaskCategory(s.to_string()))
    }
}

/// One continuous multi-channel recording at 256 Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub channel_ids: Vec<usize>,
    pub samples: Array2<f32>,
    pub task_category: TaskCategory,
    pub class_label: Option<usize>,
}

impl Session {
    pub fn new(
        channel_ids: Vec<usize>,
        samples: Array2<f32>,
        task_category: TaskCategory,
        class_label: Option<usize>,
    ) -> Result<Self> {
        let s = Session {
            channel_ids,
            samples,
            task_category,
            class_label,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn n_channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let c0 = self.samples.nrows();
        if c0 == 0 {
            return Err(Error::InvalidInput("session has no channels".into()));
        }
        if self.channel_ids.len() != c0 {
            return Err(Error::Shape(format!(
                "{} channel ids for {} sample rows",
                self.channel_ids.len(),
                c0
            )));
        }
        let mut seen = [false; NUM_ELECTRODES];
        for &id in &self.channel_ids {
            if id >= NUM_ELECTRODES {
                return Err(Error::InvalidInput(format!("electrode id {id} out of range")));
            }
            if std::mem::replace(&mut seen[id], true) {
                return Err(Error::InvalidInput(format!("duplicate electrode id {id}")));
            }
        }
        if self.samples.ncols() < PATCH_LEN {
            return Err(Error::TooShort {
                samples: self.samples.ncols(),
                required: PATCH_LEN,
            });
        }
        Ok(())
    }
}

/// Per-row z-score along the time axis, population standard deviation.
pub fn znormalize(signal: &Array2<f64>) -> Result<Array2<f64>> {
    let (rows, cols) = signal.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidInput("empty signal".into()));
    }
    if cols < 2 {
        return Err(Error::InvalidInput("z-normalization needs at least 2 samples".into()));
    }
    let mut out = signal.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let denom = var.sqrt() + ZNORM_EPS;
        row.mapv_inplace(|v| (v - mean) / denom);
    }
    Ok(out)
}

/// Rank-4 batch of one-second patches, `[B, T, C, 256]`.
///
/// Samples with fewer channels than `C` are zero-padded; `valid_channels[b]`
/// says how many leading channel slots are real.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    pub patches: Array4<f64>,
    pub channel_ids: Array2<usize>,
    pub task_category: Vec<TaskCategory>,
    pub class_label: Vec<Option<usize>>,
    pub valid_channels: Vec<usize>,
}

impl PatchBatch {
    pub fn batch_size(&self) -> usize {
        self.patches.dim().0
    }

    pub fn time_steps(&self) -> usize {
        self.patches.dim().1
    }

    pub fn channels(&self) -> usize {
        self.patches.dim().2
    }

    pub fn is_valid_slot(&self, b: usize, c: usize) -> bool {
        c < self.valid_channels[b]
    }

    /// Sub-window of time steps `[t0, t0 + len)` for every sample.
    pub fn time_window(&self, t0: usize, len: usize) -> Result<PatchBatch> {
        if len == 0 || t0 + len > self.time_steps() {
            return Err(Error::Shape(format!(
                "window [{t0}, {}) outside {} time steps",
                t0 + len,
                self.time_steps()
            )));
        }
        Ok(PatchBatch {
            patches: self.patches.slice(s![.., t0..t0 + len, .., ..]).to_owned(),
            ..self.clone()
        })
    }

    /// Stacks samples along the batch axis, zero-padding channels to the
    /// widest sample. All parts must share the same number of time steps.
    pub fn collate(parts: &[PatchBatch]) -> Result<PatchBatch> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("cannot collate zero batches".into()))?;
        let t = first.time_steps();
        let p = first.patches.dim().3;
        let c = parts.iter().map(|b| b.channels()).max().unwrap_or(0);
        let b_total: usize = parts.iter().map(|b| b.batch_size()).sum();
        let mut patches = Array4::<f64>::zeros((b_total, t, c, p));
        let mut ids = Array2::<usize>::zeros((b_total, c));
        let mut task_category = Vec::with_capacity(b_total);
        let mut class_label = Vec::with_capacity(b_total);
        let mut valid = Vec::with_capacity(b_total);
        let mut row = 0;
        for part in parts {
            if part.time_steps() != t || part.patches.dim().3 != p {
                return Err(Error::Shape("collated batches disagree on T or P".into()));
            }
            let (bp, _, cp, _) = part.patches.dim();
            patches
                .slice_mut(s![row..row + bp, .., 0..cp, ..])
                .assign(&part.patches);
            ids.slice_mut(s![row..row + bp, 0..cp]).assign(&part.channel_ids);
            task_category.extend_from_slice(&part.task_category);
            class_label.extend_from_slice(&part.class_label);
            valid.extend_from_slice(&part.valid_channels);
            row += bp;
        }
        Ok(PatchBatch {
            patches,
            channel_ids: ids,
            task_category,
            class_label,
            valid_channels: valid,
        })
    }
}

/// Normalizes a session per channel and cuts it into `⌊P0/256⌋` patches.
/// Trailing samples that do not fill a whole patch are dropped.
pub fn patchify(session: &Session) -> Result<PatchBatch> {
    let (c0, p0) = session.samples.dim();
    if p0 < PATCH_LEN {
        return Err(Error::TooShort {
            samples: p0,
            required: PATCH_LEN,
        });
    }
    let normalized = znormalize(&session.samples.mapv(f64::from))?;
    let t = p0 / PATCH_LEN;
    let mut patches = Array4::<f64>::zeros((1, t, c0, PATCH_LEN));
    for ti in 0..t {
        patches
            .slice_mut(s![0, ti, .., ..])
            .assign(&normalized.slice(s![.., ti * PATCH_LEN..(ti + 1) * PATCH_LEN]));
    }
    let channel_ids = Array2::from_shape_vec((1, c0), session.channel_ids.clone())
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(PatchBatch {
        patches,
        channel_ids,
        task_category: vec![session.task_category],
        class_label: vec![session.class_label],
        valid_channels: vec![c0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn session(c0: usize, p0: usize) -> Session {
        let samples = Array2::from_shape_fn((c0, p0), |(c, p)| ((c * 7 + p) % 13) as f32 - 6.0);
        Session::new((0..c0).collect(), samples, TaskCategory::Resting, Some(1)).unwrap()
    }

    #[test]
    fn znorm_constant_row_is_zero() {
        let out = znormalize(&array![[5.0, 5.0, 5.0, 5.0]]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn znorm_small_row() {
        let out = znormalize(&array![[1.0, 2.0, 3.0]]).unwrap();
        let expect = [-1.224_74, 0.0, 1.224_74];
        for (o, e) in out.iter().zip(expect) {
            assert!((o - e).abs() < 1e-3, "{o} vs {e}");
        }
    }

    #[test]
    fn znorm_rejects_empty() {
        assert!(znormalize(&Array2::zeros((0, 4))).is_err());
        assert!(znormalize(&Array2::zeros((2, 0))).is_err());
    }

    #[test]
    fn patchify_exact_division() {
        let b = patchify(&session(3, 512)).unwrap();
        assert_eq!(b.patches.dim(), (1, 2, 3, 256));
        assert_eq!(b.valid_channels, vec![3]);
    }

    #[test]
    fn patchify_drops_remainder() {
        let s = session(2, 600);
        let b = patchify(&s).unwrap();
        assert_eq!(b.time_steps(), 2);
        let norm = znormalize(&s.samples.mapv(f64::from)).unwrap();
        for t in 0..2 {
            for c in 0..2 {
                for p in 0..256 {
                    assert_eq!(b.patches[[0, t, c, p]], norm[[c, t * 256 + p]]);
                }
            }
        }
    }

    #[test]
    fn patchify_too_short() {
        let s = Session {
            channel_ids: vec![0],
            samples: Array2::zeros((1, 100)),
            task_category: TaskCategory::Resting,
            class_label: None,
        };
        assert!(matches!(patchify(&s), Err(Error::TooShort { samples: 100, .. })));
    }

    #[test]
    fn session_rejects_duplicate_ids() {
        let r = Session::new(vec![3, 3], Array2::zeros((2, 256)), TaskCategory::Erp, None);
        assert!(r.is_err());
    }

    #[test]
    fn collate_pads_channels() {
        let a = patchify(&session(3, 512)).unwrap();
        let b = patchify(&session(2, 512)).unwrap();
        let batch = PatchBatch::collate(&[a.clone(), b]).unwrap();
        assert_eq!(batch.patches.dim(), (2, 2, 3, 256));
        assert_eq!(batch.valid_channels, vec![3, 2]);
        assert!(batch.patches.slice(s![1, .., 2, ..]).iter().all(|&v| v == 0.0));
        assert_eq!(batch.patches.slice(s![0..1, .., .., ..]), a.patches);
    }

    #[test]
    fn task_category_round_trip() {
        for c in TaskCategory::ALL {
            assert_eq!(c.as_str().parse::<TaskCategory>().unwrap(), c);
            assert_eq!(TaskCategory::from_index(c.index()).unwrap(), c);
        }
    }
}
