use serde::{Deserialize, Serialize};

use crate::attention::Mat;
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient was NaN or infinite; nothing changed.
    SkippedNonFinite,
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Mat>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm.is_finite() && norm > max_norm && max_norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = store.entries().iter().map(|e| Mat::zeros(e.shape)).collect();
        AdamW {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Grows the moment buffers after parameters were added to the store.
    pub fn sync(&mut self, store: &ParamStore) {
        for e in &store.entries()[self.m.len()..] {
            self.m.push(Mat::zeros(e.shape));
            self.v.push(Mat::zeros(e.shape));
        }
    }

    /// One update. Parameters whose gradient is `None` are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Mat>], lr: f64) -> Result<StepOutcome> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Shape(format!(
                "{} gradients, {} moments for {} parameters",
                grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        if grads.iter().flatten().any(|g| g.iter().any(|x| !x.is_finite())) {
            log::warn!("non-finite gradient at optimizer step {}; update skipped", self.step + 1);
            return Ok(StepOutcome::SkippedNonFinite);
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let decay = 1.0 - lr * weight_decay;
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let p = store.get_mut(id);
            if p.dim() != g.dim() {
                return Err(Error::Shape(format!("gradient {:?} for parameter {:?}", g.dim(), p.dim())));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *p *= decay;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= lr * mh / (vh.sqrt() + eps);
            });
        }
        Ok(StepOutcome::Applied)
    }

    pub fn moments(&self) -> (&[Mat], &[Mat]) {
        (&self.m, &self.v)
    }

    pub fn from_moments(config: AdamWConfig, step: u64, m: Vec<Mat>, v: Vec<Mat>) -> Self {
        AdamW { config, step, m, v }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    fn scalar_store(v: f64) -> (ParamStore, crate::params::ParamId) {
        let mut s = ParamStore::new(0);
        let id = s.add("p", (1, 1), Init::Zeros);
        s.set(id, Mat::from_elem((1, 1), v)).unwrap();
        (s, id)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = scalar_store(0.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        opt.step(&mut s, &[Some(Mat::from_elem((1, 1), 1.0))], 1e-3).unwrap();
        assert!((s.get(id)[[0, 0]] + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let (mut s, id) = scalar_store(0.7);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &s);
        opt.step(&mut s, &[Some(Mat::zeros((1, 1)))], 1e-2).unwrap();
        assert_eq!(s.get(id)[[0, 0]], 0.7);
    }

    #[test]
    fn decay_only_scales() {
        let (mut s, id) = scalar_store(2.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        opt.step(&mut s, &[Some(Mat::zeros((1, 1)))], 0.1).unwrap();
        assert!((s.get(id)[[0, 0]] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_is_identity() {
        let (mut s, id) = scalar_store(-0.3);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        opt.step(&mut s, &[Some(Mat::from_elem((1, 1), 4.0))], 0.0).unwrap();
        assert_eq!(s.get(id)[[0, 0]], -0.3);
    }

    #[test]
    fn non_finite_gradient_skips() {
        let (mut s, id) = scalar_store(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        let out = opt.step(&mut s, &[Some(Mat::from_elem((1, 1), f64::NAN))], 0.1).unwrap();
        assert_eq!(out, StepOutcome::SkippedNonFinite);
        assert_eq!(s.get(id)[[0, 0]], 1.0);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Some(Mat::from_elem((1, 2), 3.0)), None, Some(Mat::from_elem((1, 1), 4.0 * 2f64.sqrt()))];
        let n = clip_global_norm(&mut g, 1.0);
        assert!((n - (18.0f64 + 32.0).sqrt()).abs() < 1e-12);
        let after = clip_global_norm(&mut g, 10.0);
        assert!((after - 1.0).abs() < 1e-12);
    }
}
