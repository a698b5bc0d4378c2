//! Forward diffusion corruption of image features.
//!
//! Step `k` mixes the clean grid with Gaussian noise:
//! `x(k) = sqrt(retention[k]) * x + sqrt(1 - retention[k]) * eps`, where
//! `retention[k]` is the running product of `1 - rate[i]` for `i <= k`.
//! Per-step rates follow a scaled sigmoid over a linear grid on `[-6, 6]`.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::NoiseError;
use crate::rng::{purpose, stream};
use crate::scenegen::ImageFeatures;

pub const RATE_MIN: f64 = 1e-5;
pub const RATE_MAX: f64 = 0.5e-2;
pub const DEFAULT_STEPS: usize = 500;
const GRID_LO: f64 = -6.0;
const GRID_HI: f64 = 6.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(rename = "rate")]
    pub rates: Vec<f64>,
    pub retention: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Noise rate for a sigmoid logit `l`: `sigmoid(l) * (RATE_MAX - RATE_MIN) + RATE_MIN`.
pub fn noise_rate(l: f64) -> f64 {
    sigmoid(l) * (RATE_MAX - RATE_MIN) + RATE_MIN
}

impl NoiseSchedule {
    pub fn new(steps: usize) -> Result<Self, NoiseError> {
        if steps == 0 {
            return Err(NoiseError::InvalidStepCount(steps));
        }
        let rates: Vec<f64> = (0..steps)
            .map(|k| {
                let l = if steps == 1 {
                    GRID_LO
                } else {
                    GRID_LO + (GRID_HI - GRID_LO) * k as f64 / (steps - 1) as f64
                };
                noise_rate(l)
            })
            .collect();
        let retention = rates
            .iter()
            .scan(1.0, |acc, r| {
                *acc *= 1.0 - r;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            steps,
            rates,
            retention,
        })
    }

    /// Retention at step `k`; `k = -1` (no noise) is 1.
    pub fn retention_at(&self, k: isize) -> Option<f64> {
        match k {
            -1 => Some(1.0),
            k if k >= 0 => self.retention.get(k as usize).copied(),
            _ => None,
        }
    }

    fn check(&self, k: usize) -> Result<f64, NoiseError> {
        self.retention.get(k).copied().ok_or(NoiseError::StepOutOfRange {
            step: k,
            steps: self.steps,
        })
    }

    /// Noised copy of `x` at step `k`, with noise drawn from `seed`.
    pub fn add_noise(&self, x: &ImageFeatures, k: usize, seed: u64) -> Result<ImageFeatures, NoiseError> {
        let mut rng = stream(seed, purpose::NOISE);
        let eps: Vec<f64> = (0..x.as_slice().len())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        self.add_noise_with(x, k, &eps)
    }

    /// Same as [`add_noise`](Self::add_noise) with caller-supplied noise.
    pub fn add_noise_with(&self, x: &ImageFeatures, k: usize, eps: &[f64]) -> Result<ImageFeatures, NoiseError> {
        let keep = self.check(k)?;
        assert_eq!(eps.len(), x.as_slice().len(), "noise must match the feature grid");
        let (a, b) = (keep.sqrt(), (1.0 - keep).sqrt());
        let data = x
            .as_slice()
            .iter()
            .zip(eps)
            .map(|(&v, &e)| (a * v as f64 + b * e) as f32)
            .collect();
        Ok(ImageFeatures::from_vec(data).expect("shape preserved"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{render_features, sample_scene, CooccurrencePrior};

    #[test]
    fn zero_steps_rejected() {
        assert_eq!(NoiseSchedule::new(0), Err(NoiseError::InvalidStepCount(0)));
    }

    #[test]
    fn rates_within_bounds_and_retention_decreasing() {
        let s = NoiseSchedule::new(DEFAULT_STEPS).unwrap();
        assert!(s.rates.iter().all(|&r| r > 1e-5 && r < 5.01e-3));
        assert!(s.retention.windows(2).all(|w| w[1] < w[0]));
        assert!(s.retention[0] < 1.0);
        assert_eq!(s.retention_at(-1), Some(1.0));
        assert_eq!(s.retention_at(500), None);
    }

    #[test]
    fn zero_noise_scales_signal() {
        let s = NoiseSchedule::new(DEFAULT_STEPS).unwrap();
        let x = render_features(&sample_scene(&CooccurrencePrior::standard(), 3));
        let eps = vec![0.0; x.as_slice().len()];
        for k in [0, 250, 499] {
            let y = s.add_noise_with(&x, k, &eps).unwrap();
            let a = s.retention[k].sqrt();
            for (&yi, &xi) in y.as_slice().iter().zip(x.as_slice()) {
                assert_eq!(yi, (a * xi as f64) as f32);
            }
        }
    }

    #[test]
    fn zero_image_is_pure_noise() {
        let s = NoiseSchedule::new(DEFAULT_STEPS).unwrap();
        let x = ImageFeatures::zeros();
        let eps: Vec<f64> = (0..x.as_slice().len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let y = s.add_noise_with(&x, 100, &eps).unwrap();
        let b = (1.0 - s.retention[100]).sqrt();
        for (&yi, &e) in y.as_slice().iter().zip(&eps) {
            assert_eq!(yi, (b * e) as f32);
        }
    }

    #[test]
    fn step_out_of_range() {
        let s = NoiseSchedule::new(10).unwrap();
        assert_eq!(
            s.add_noise(&ImageFeatures::zeros(), 10, 0),
            Err(NoiseError::StepOutOfRange { step: 10, steps: 10 })
        );
    }

    #[test]
    fn deterministic_and_input_untouched() {
        let s = NoiseSchedule::new(DEFAULT_STEPS).unwrap();
        let x = render_features(&sample_scene(&CooccurrencePrior::standard(), 5));
        let before = x.clone();
        let a = s.add_noise(&x, 499, 9).unwrap();
        let b = s.add_noise(&x, 499, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(x, before);
        assert_ne!(a, s.add_noise(&x, 499, 10).unwrap());
    }

    #[test]
    fn json_dump_has_named_fields() {
        let s = NoiseSchedule::new(3).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s.to_json()).unwrap();
        assert_eq!(v["T"], 3);
        assert_eq!(v["rate"].as_array().unwrap().len(), 3);
        assert_eq!(v["retention"].as_array().unwrap().len(), 3);
    }
}
