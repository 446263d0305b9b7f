//! Hann-windowed single-sided periodogram in log10 units.
//!
//! The window multiplies the patch before the transform, the squared
//! magnitude of bins `0..=P/2` is divided by the window energy `Σ w²`, floored
//! at [`PSD_FLOOR`], and returned as `log10`. No factor of ten is applied and
//! interior bins are not doubled.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::eegdata::PATCH_LEN;
use crate::error::{Error, Result};

pub const PSD_FLOOR: f64 = 1e-10;

/// Number of one-sided bins for a patch of length `p`.
pub const fn num_bins(p: usize) -> usize {
    p / 2 + 1
}

/// Log-power spectrum of one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub bins: Vec<f64>,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    /// Index of the largest bin (first one on ties).
    pub fn argmax(&self) -> usize {
        self.bins
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0
    }
}

/// Symmetric Hann window `0.5 (1 - cos(2πp/(P-1)))`.
pub fn hann(p: usize) -> Result<Vec<f64>> {
    if p < 2 {
        return Err(Error::InvalidInput(format!("Hann window needs P >= 2, got {p}")));
    }
    let denom = (p - 1) as f64;
    Ok((0..p)
        .map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / denom).cos()))
        .collect())
}

/// Reference transform `X[k] = Σ x[p] e^{-2πi kp/P}` evaluated term by term.
pub fn dft_oracle(x: &[f64]) -> Vec<Complex<f64>> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter().enumerate().fold(Complex::new(0.0, 0.0), |acc, (p, &v)| {
                // Reduce kp mod n first so the angle stays small.
                let ang = -2.0 * PI * ((k * p) % n) as f64 / n as f64;
                acc + Complex::new(v * ang.cos(), v * ang.sin())
            })
        })
        .collect()
}

/// Window table and transform plan for one patch length.
pub struct Periodogram {
    window: Vec<f64>,
    energy: f64,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Periodogram {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Periodogram")
            .field("len", &self.window.len())
            .field("energy", &self.energy)
            .finish()
    }
}

impl Periodogram {
    pub fn new(p: usize) -> Result<Self> {
        let window = hann(p)?;
        let energy = window.iter().map(|w| w * w).sum();
        let fft = FftPlanner::new().plan_fft_forward(p);
        Ok(Periodogram { window, energy, fft })
    }

    /// Shared instance for 256-sample patches.
    pub fn standard() -> &'static Periodogram {
        static P: OnceLock<Periodogram> = OnceLock::new();
        P.get_or_init(|| Periodogram::new(PATCH_LEN).expect("256 is a valid window length"))
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// `Σ w²` of the window.
    pub fn window_energy(&self) -> f64 {
        self.energy
    }

    /// Full complex spectrum of `x` (no window).
    pub fn transform(&self, x: &[f64]) -> Result<Vec<Complex<f64>>> {
        self.check_len(x)?;
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.fft.process(&mut buf);
        Ok(buf)
    }

    pub fn psd_log(&self, patch: &[f64]) -> Result<Spectrum> {
        self.check_len(patch)?;
        let windowed: Vec<f64> = patch.iter().zip(&self.window).map(|(x, w)| x * w).collect();
        let spec = self.transform(&windowed)?;
        Ok(Spectrum {
            bins: spec[..num_bins(patch.len())]
                .iter()
                .map(|z| (z.norm_sqr() / self.energy).max(PSD_FLOOR).log10())
                .collect(),
        })
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.window.len() {
            return Err(Error::Shape(format!(
                "patch length {} does not match periodogram length {}",
                x.len(),
                self.window.len()
            )));
        }
        Ok(())
    }
}

/// Convenience wrapper building a periodogram for `patch.len()`.
pub fn psd_log(patch: &[f64]) -> Result<Spectrum> {
    if patch.len() == PATCH_LEN {
        Periodogram::standard().psd_log(patch)
    } else {
        Periodogram::new(patch.len())?.psd_log(patch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hann_four() {
        let w = hann(4).unwrap();
        for (a, b) in w.iter().zip([0.0, 0.75, 0.75, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn hann_endpoints_and_symmetry() {
        for p in [2, 3, 8, 255, 256] {
            let w = hann(p).unwrap();
            assert!(w[0].abs() < 1e-15 && w[p - 1].abs() < 1e-15);
            for i in 0..p {
                assert!((w[i] - w[p - 1 - i]).abs() < 1e-12);
            }
        }
        assert!(hann(1).is_err());
    }

    #[test]
    fn zero_patch_hits_floor() {
        let s = psd_log(&[0.0; 256]).unwrap();
        assert_eq!(s.len(), 129);
        assert!(s.bins.iter().all(|&b| b == -10.0));
    }

    #[test]
    fn oracle_impulse_and_constant() {
        let x = dft_oracle(&[1.0, 0.0, 0.0, 0.0]);
        assert!(x.iter().all(|z| (z.re - 1.0).abs() < 1e-15 && z.im.abs() < 1e-15));
        let x = dft_oracle(&[1.0; 4]);
        assert!((x[0].re - 4.0).abs() < 1e-15);
        assert!(x[1..].iter().all(|z| z.norm() < 1e-12));
    }

    #[test]
    fn cosine_matches_oracle() {
        let p = 8;
        let x: Vec<f64> = (0..p).map(|i| (2.0 * PI * 2.0 * i as f64 / p as f64).cos()).collect();
        let per = Periodogram::new(p).unwrap();
        let got = per.psd_log(&x).unwrap();
        let w = hann(p).unwrap();
        let xw: Vec<f64> = x.iter().zip(&w).map(|(a, b)| a * b).collect();
        let energy: f64 = w.iter().map(|v| v * v).sum();
        let oracle = dft_oracle(&xw);
        for k in 0..=p / 2 {
            let expect = (oracle[k].norm_sqr() / energy).max(PSD_FLOOR).log10();
            assert!((got.bins[k] - expect).abs() <= 1e-6 * expect.abs().max(1e-12), "bin {k}");
        }
    }

    #[test]
    fn scaling_shifts_log_power() {
        let x: Vec<f64> = (0..256).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
        let a = 3.5;
        let ax: Vec<f64> = x.iter().map(|v| a * v).collect();
        let s1 = psd_log(&x).unwrap();
        let s2 = psd_log(&ax).unwrap();
        for (u, v) in s1.bins.iter().zip(&s2.bins) {
            if *u > -9.0 {
                assert!((v - u - 2.0 * a.log10()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn standard_energy_is_stable() {
        let e1 = Periodogram::standard().window_energy();
        let e2 = Periodogram::new(256).unwrap().window_energy();
        assert_eq!(e1, e2);
        // Σ w² = 3(P-1)/8 for the symmetric Hann window.
        assert!((e1 - 3.0 * 255.0 / 8.0).abs() < 1e-9);
    }

    #[test]
    fn wrong_length_rejected() {
        assert!(Periodogram::new(8).unwrap().psd_log(&[0.0; 7]).is_err());
    }
}
