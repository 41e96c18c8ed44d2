//! Intensity-only stochastic augmentation.
//!
//! Copies stay pixel-aligned with the original so per-pixel predictions on
//! different copies can be compared directly.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::MultiModalSample;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPolicy {
    /// Standard deviation of additive Gaussian noise, applied per modality.
    pub noise_sigma: f64,
    /// Gamma exponents are drawn uniformly from this interval.
    pub gamma_range: (f64, f64),
    /// Brightness offsets are drawn uniformly from `[-delta, delta]`.
    pub brightness_delta: f64,
    pub m_copies: usize,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            noise_sigma: 0.05,
            gamma_range: (0.9, 1.1),
            brightness_delta: 0.05,
            m_copies: 5,
        }
    }
}

impl AugmentPolicy {
    /// A policy whose copies are exact replicas of the input.
    pub fn identity(m_copies: usize) -> Self {
        Self {
            noise_sigma: 0.0,
            gamma_range: (1.0, 1.0),
            brightness_delta: 0.0,
            m_copies,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_copies == 0 {
            return Err(Error::config("augment.m_copies", "must be at least 1"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(
                "augment.noise_sigma",
                "must be finite and >= 0",
            ));
        }
        if !(self.brightness_delta >= 0.0 && self.brightness_delta.is_finite()) {
            return Err(Error::config(
                "augment.brightness_delta",
                "must be finite and >= 0",
            ));
        }
        let (lo, hi) = self.gamma_range;
        if !(lo > 0.0 && lo <= 1.0 && hi >= 1.0 && hi.is_finite()) {
            return Err(Error::config(
                "augment.gamma_range",
                format!("must satisfy 0 < min <= 1 <= max, got ({lo}, {hi})"),
            ));
        }
        Ok(())
    }
}

fn perturb(image: &Array2<f32>, policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let (lo, hi) = policy.gamma_range;
    let gamma = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let shift = if policy.brightness_delta > 0.0 {
        rng.gen_range(-policy.brightness_delta..=policy.brightness_delta)
    } else {
        0.0
    };
    let noise = (policy.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, policy.noise_sigma).expect("validated sigma"));
    image.mapv(|v| {
        let mut x = f64::from(v);
        if gamma != 1.0 {
            x = x.powf(gamma);
        }
        x += shift;
        if let Some(noise) = &noise {
            x += noise.sample(rng);
        }
        x.clamp(0.0, 1.0) as f32
    })
}

/// Produces `policy.m_copies` augmented copies of `sample`.
///
/// Copy `m` draws from a stream keyed by `(seed, sample_id, m)`, so the result
/// does not depend on batch composition or call order. Masks pass through.
pub fn augment_copies(
    sample: &MultiModalSample,
    policy: &AugmentPolicy,
    seed: u64,
) -> Vec<MultiModalSample> {
    (0..policy.m_copies)
        .map(|m| {
            let mut rng = rng::stream(
                seed,
                &["augment".into(), sample.sample_id.as_str().into(), m.into()],
            );
            MultiModalSample {
                sample_id: sample.sample_id.clone(),
                modality_a: perturb(&sample.modality_a, policy, &mut rng),
                modality_b: perturb(&sample.modality_b, policy, &mut rng),
                mask: sample.mask.clone(),
            }
        })
        .collect()
}
