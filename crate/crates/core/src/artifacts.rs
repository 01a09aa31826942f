//! Measurement artifacts applied to clean traces: ADC-rate reduction and
//! additive probe noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::trace::PowerTrace;

/// Adds zero-mean Gaussian noise of `std` watts to every sample.
pub fn add_gaussian_noise(trace: &PowerTrace, std: f64, seed: u64) -> Result<PowerTrace> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::Config(format!(
            "noise std must be a non-negative number, got {std}"
        )));
    }
    let mut out = trace.clone();
    if std == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in &mut out.samples {
        *s += normal.sample(&mut rng);
    }
    Ok(out)
}

fn divisors_hint(native: f64) -> String {
    let ratios = [1u64, 2, 4, 5, 10, 20, 25, 50, 100];
    ratios
        .iter()
        .map(|r| format!("{}", native / *r as f64))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Integer decimation factor from `native` to `target`, if there is one.
pub fn decimation_factor(native: f64, target: f64) -> Option<usize> {
    if !(target > 0.0) || target > native {
        return None;
    }
    let r = native / target;
    let k = r.round();
    ((r - k).abs() <= 1e-9 * r && k >= 1.0).then_some(k as usize)
}

/// Reduces the sample rate by averaging consecutive bins. A partial last
/// bin is treated as padded with zeros.
pub fn resample(trace: &PowerTrace, target_rate: f64) -> Result<PowerTrace> {
    let k = decimation_factor(trace.sample_rate, target_rate).ok_or_else(|| Error::Resample {
        native: trace.sample_rate,
        target: target_rate,
        valid: divisors_hint(trace.sample_rate),
    })?;
    let samples = trace
        .samples
        .chunks(k)
        .map(|c| c.iter().sum::<f64>() / k as f64)
        .collect();
    Ok(PowerTrace {
        tile_id: trace.tile_id,
        sample_rate: target_rate,
        t0: trace.t0,
        samples,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactSpec {
    /// Standard deviation of the additive noise, watts.
    pub noise_std: f64,
    /// Measurement rate; `None` keeps the native rate.
    pub target_rate: Option<f64>,
    pub seed: u64,
    /// Add noise after rate reduction (noise seen by the measuring ADC).
    pub noise_after_resample: bool,
}

impl Default for ArtifactSpec {
    fn default() -> Self {
        Self {
            noise_std: 0.0,
            target_rate: None,
            seed: 0,
            noise_after_resample: true,
        }
    }
}

/// Per-tile noise seed, independent of the noise level.
pub fn tile_seed(seed: u64, tile_id: usize) -> u64 {
    seed ^ (tile_id as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

impl ArtifactSpec {
    pub fn apply(&self, trace: &PowerTrace) -> Result<PowerTrace> {
        let seed = tile_seed(self.seed, trace.tile_id);
        let resampled = |t: &PowerTrace| match self.target_rate {
            Some(r) => resample(t, r),
            None => Ok(t.clone()),
        };
        if self.noise_after_resample {
            add_gaussian_noise(&resampled(trace)?, self.noise_std, seed)
        } else {
            resampled(&add_gaussian_noise(trace, self.noise_std, seed)?)
        }
    }

    pub fn apply_all(&self, traces: &[PowerTrace]) -> Result<Vec<PowerTrace>> {
        traces.iter().map(|t| self.apply(t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(n: usize) -> PowerTrace {
        PowerTrace {
            tile_id: 3,
            sample_rate: 1e10,
            t0: 1e-6,
            samples: (0..n).map(|i| i as f64 * 1e-6).collect(),
        }
    }

    #[test]
    fn bin_means() {
        let t = ramp(7);
        let r = resample(&t, 5e9).unwrap();
        assert_eq!(r.samples.len(), 4);
        assert!((r.samples[0] - 0.5e-6).abs() < 1e-18);
        assert!((r.samples[3] - 3e-6).abs() < 1e-18); // (6 + 0) / 2
        assert_eq!(r.t0, t.t0);
    }

    #[test]
    fn invalid_rate_lists_divisors() {
        let err = resample(&ramp(10), 3e9).unwrap_err();
        match err {
            Error::Resample { valid, .. } => assert!(valid.contains("5000000000")),
            e => panic!("{e}"),
        }
        assert!(resample(&ramp(10), 2e10).is_err());
        assert!(resample(&ramp(10), 0.0).is_err());
    }

    #[test]
    fn zero_noise_is_identity() {
        let t = ramp(50);
        assert_eq!(add_gaussian_noise(&t, 0.0, 9).unwrap(), t);
        assert!(add_gaussian_noise(&t, -1.0, 9).is_err());
    }

    #[test]
    fn noise_statistics() {
        let t = PowerTrace {
            tile_id: 0,
            sample_rate: 1e10,
            t0: 0.0,
            samples: vec![0.0; 200_000],
        };
        let n = add_gaussian_noise(&t, 1e-3, 4).unwrap();
        let mean = n.samples.iter().sum::<f64>() / n.samples.len() as f64;
        let var =
            n.samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n.samples.len() as f64;
        assert!(mean.abs() < 1e-5);
        assert!((var.sqrt() - 1e-3).abs() < 1e-5);
    }

    #[test]
    fn same_seed_scales_noise() {
        let t = PowerTrace {
            tile_id: 0,
            sample_rate: 1e10,
            t0: 0.0,
            samples: vec![0.0; 100],
        };
        let a = ArtifactSpec {
            noise_std: 1e-3,
            seed: 7,
            ..Default::default()
        }
        .apply(&t)
        .unwrap();
        let b = ArtifactSpec {
            noise_std: 2e-3,
            seed: 7,
            ..Default::default()
        }
        .apply(&t)
        .unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert!((2.0 * x - y).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn resampling_preserves_energy(n in 1usize..400, k in prop::sample::select(vec![1usize, 2, 4, 5, 10, 50])) {
            let t = ramp(n);
            let r = resample(&t, 1e10 / k as f64).unwrap();
            prop_assert_eq!(r.samples.len(), n.div_ceil(k));
            prop_assert!((r.energy() - t.energy()).abs() <= 1e-9 * t.energy().max(1e-30));
        }
    }
}
