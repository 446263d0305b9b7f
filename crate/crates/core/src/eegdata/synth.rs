//! Synthetic EEG sessions with class-dependent spectral signatures.
//!
//! Each class owns a narrow band of five sinusoids centred on its peak
//! frequency (offsets -1, -0.5, 0, +0.5, +1 Hz with relative amplitudes
//! 0.35, 0.7, 1.0, 0.7, 0.35). Phases are drawn once per session and shared by
//! all channels, so channels are coherent copies scaled by a per-electrode
//! gain `0.6 + 0.4 |sin(1.7 id + 0.3)|`. White Gaussian noise is added at the
//! requested SNR relative to the mean per-channel signal power.
//!
//! | class | peak (Hz) |
//! |-------|-----------|
//! | 0     | 10        |
//! | 1     | 22        |
//! | 2     | 35        |
//! | 3     | 6         |
//! | 4     | 16        |
//! | 5     | 28        |

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::electrodes::NUM_ELECTRODES;
use super::session::{Session, TaskCategory, SAMPLE_RATE};
use crate::error::{Error, Result};

pub const CLASS_PEAKS_HZ: [f64; 6] = [10.0, 22.0, 35.0, 6.0, 16.0, 28.0];
const BAND_OFFSETS_HZ: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];
const BAND_WEIGHTS: [f64; 5] = [0.35, 0.7, 1.0, 0.7, 0.35];

pub fn num_classes() -> usize {
    CLASS_PEAKS_HZ.len()
}

/// Parameters of one synthetic session.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub class_id: usize,
    pub channels: Vec<usize>,
    pub duration_s: usize,
    pub seed: u64,
    /// Peak sinusoid amplitude before the per-channel gain.
    pub amplitude: f64,
    /// Signal-to-noise ratio in dB; `None` disables noise.
    pub snr_db: Option<f64>,
    pub task_category: TaskCategory,
}

impl SynthSpec {
    pub fn new(class_id: usize, channels: Vec<usize>, duration_s: usize, seed: u64) -> Self {
        SynthSpec {
            class_id,
            channels,
            duration_s,
            seed,
            amplitude: 1.0,
            snr_db: Some(10.0),
            task_category: TaskCategory::Resting,
        }
    }
}

pub fn channel_gain(id: usize) -> f64 {
    0.6 + 0.4 * (1.7 * id as f64 + 0.3).sin().abs()
}

pub fn synth_session(spec: &SynthSpec) -> Result<Session> {
    let peak = *CLASS_PEAKS_HZ
        .get(spec.class_id)
        .ok_or(Error::UnknownClass(spec.class_id))?;
    if spec.duration_s < 1 {
        return Err(Error::InvalidInput("duration must be at least one second".into()));
    }
    if spec.channels.is_empty() || spec.channels.iter().any(|&c| c >= NUM_ELECTRODES) {
        return Err(Error::InvalidInput("channels must be non-empty electrode ids".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.duration_s * SAMPLE_RATE as usize;
    let fs = SAMPLE_RATE as f64;
    let phases: Vec<f64> = BAND_OFFSETS_HZ.iter().map(|_| rng.random::<f64>() * 2.0 * PI).collect();

    let base: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            BAND_OFFSETS_HZ
                .iter()
                .zip(BAND_WEIGHTS)
                .zip(&phases)
                .map(|((off, w), ph)| w * (2.0 * PI * (peak + off) * t + ph).sin())
                .sum::<f64>()
                * spec.amplitude
        })
        .collect();

    let band_power: f64 = BAND_WEIGHTS.iter().map(|w| w * w / 2.0).sum::<f64>() * spec.amplitude.powi(2);
    let mean_gain_sq =
        spec.channels.iter().map(|&c| channel_gain(c).powi(2)).sum::<f64>() / spec.channels.len() as f64;
    let noise_std = match spec.snr_db {
        Some(db) => (band_power * mean_gain_sq / 10f64.powf(db / 10.0)).sqrt(),
        None => 0.0,
    };
    let noise = Normal::new(0.0, 1.0).expect("unit normal");

    let mut samples = Array2::<f32>::zeros((spec.channels.len(), n));
    for (row, &ch) in spec.channels.iter().enumerate() {
        let g = channel_gain(ch);
        for (i, b) in base.iter().enumerate() {
            let eps = if noise_std > 0.0 { noise_std * noise.sample(&mut rng) } else { 0.0 };
            samples[[row, i]] = (g * b + eps) as f32;
        }
    }
    Session::new(spec.channels.clone(), samples, spec.task_category, Some(spec.class_id))
}
