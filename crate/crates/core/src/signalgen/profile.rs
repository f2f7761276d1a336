//! Per-tag hardware impairment profiles and the population generator.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SignalError;
use crate::rng::{purpose, substream};

/// Front-end imperfections of one tag: the fingerprint a classifier has to
/// learn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagProfile {
    pub tag_id: u32,
    pub cfo_hz: f64,
    /// Amplitude ratio applied to the in-phase path.
    pub iq_gain_imbalance: f64,
    /// Quadrature skew of the Q path, radians.
    pub iq_phase_imbalance_rad: f64,
    pub dc_offset: Complex64,
    /// Standard deviation of the per-sample phase random-walk step.
    pub phase_noise_std_rad: f64,
    /// Coefficients `c2, c3, ...` of `x + c2 x^2 + c3 x^3 + ...`.
    pub harmonic_coeffs: Vec<f64>,
    /// Switching edge duration, samples.
    pub rise_time_samples: f64,
}

impl TagProfile {
    /// A profile that leaves the baseband untouched.
    pub fn identity(tag_id: u32) -> Self {
        Self {
            tag_id,
            cfo_hz: 0.0,
            iq_gain_imbalance: 1.0,
            iq_phase_imbalance_rad: 0.0,
            dc_offset: Complex64::new(0.0, 0.0),
            phase_noise_std_rad: 0.0,
            harmonic_coeffs: Vec::new(),
            rise_time_samples: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        let bad = |what: &'static str| SignalError::InvalidProfile {
            tag_id: self.tag_id,
            what,
        };
        if !(self.iq_gain_imbalance > 0.0) || !self.iq_gain_imbalance.is_finite() {
            return Err(bad("iq_gain_imbalance must be positive"));
        }
        if !(self.phase_noise_std_rad >= 0.0) || !self.phase_noise_std_rad.is_finite() {
            return Err(bad("phase_noise_std_rad must be non-negative"));
        }
        if !(self.rise_time_samples >= 0.0) || !self.rise_time_samples.is_finite() {
            return Err(bad("rise_time_samples must be non-negative"));
        }
        let finite = self.cfo_hz.is_finite()
            && self.iq_phase_imbalance_rad.is_finite()
            && self.dc_offset.re.is_finite()
            && self.dc_offset.im.is_finite()
            && self.harmonic_coeffs.iter().all(|c| c.is_finite());
        if !finite {
            return Err(bad("non-finite parameter"));
        }
        Ok(())
    }
}

/// Ranges the population generator draws each impairment from, uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpairmentRanges {
    pub cfo_hz: (f64, f64),
    pub iq_gain_imbalance: (f64, f64),
    pub iq_phase_imbalance_rad: (f64, f64),
    /// Magnitude range; the phase of the offset is uniform.
    pub dc_offset_mag: (f64, f64),
    pub phase_noise_std_rad: (f64, f64),
    pub harmonic: (f64, f64),
    pub rise_time_samples: (f64, f64),
}

impl Default for ImpairmentRanges {
    fn default() -> Self {
        Self {
            cfo_hz: (-2_000.0, 2_000.0),
            iq_gain_imbalance: (0.9, 1.1),
            iq_phase_imbalance_rad: (-0.05, 0.05),
            dc_offset_mag: (0.0, 0.05),
            phase_noise_std_rad: (0.0, 5e-4),
            harmonic: (-0.05, 0.05),
            rise_time_samples: (0.0, 8.0),
        }
    }
}

fn draw<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Draws one profile for `tag_id` from its own substream of `seed`.
pub fn draw_profile(tag_id: u32, seed: u64, ranges: &ImpairmentRanges) -> TagProfile {
    let mut rng = substream(seed, &[purpose::PROFILE, u64::from(tag_id)]);
    let cfo_hz = draw(&mut rng, ranges.cfo_hz);
    let iq_gain_imbalance = draw(&mut rng, ranges.iq_gain_imbalance);
    let iq_phase_imbalance_rad = draw(&mut rng, ranges.iq_phase_imbalance_rad);
    let dc_mag = draw(&mut rng, ranges.dc_offset_mag);
    let dc_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let phase_noise_std_rad = draw(&mut rng, ranges.phase_noise_std_rad);
    let harmonic_coeffs = vec![draw(&mut rng, ranges.harmonic), draw(&mut rng, ranges.harmonic)];
    let rise_time_samples = draw(&mut rng, ranges.rise_time_samples);
    TagProfile {
        tag_id,
        cfo_hz,
        iq_gain_imbalance,
        iq_phase_imbalance_rad,
        dc_offset: Complex64::from_polar(dc_mag, dc_phase),
        phase_noise_std_rad,
        harmonic_coeffs,
        rise_time_samples,
    }
}

/// Tags `0..count`, each drawn independently under `seed`.
pub fn generate_population(count: u32, seed: u64, ranges: &ImpairmentRanges) -> Vec<TagProfile> {
    (0..count).map(|id| draw_profile(id, seed, ranges)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_respects_invariants() {
        let ranges = ImpairmentRanges::default();
        for p in generate_population(200, 17, &ranges) {
            p.validate().unwrap();
            assert!(p.cfo_hz.abs() <= 2_000.0);
            assert!((0.9..=1.1).contains(&p.iq_gain_imbalance));
            assert!(p.rise_time_samples <= 8.0);
            assert_eq!(p.harmonic_coeffs.len(), 2);
        }
    }

    #[test]
    fn different_seeds_give_different_profiles() {
        let ranges = ImpairmentRanges::default();
        for id in 0..50 {
            assert_ne!(draw_profile(id, 1, &ranges), draw_profile(id, 2, &ranges));
        }
    }

    #[test]
    fn population_is_deterministic() {
        let ranges = ImpairmentRanges::default();
        assert_eq!(generate_population(5, 9, &ranges), generate_population(5, 9, &ranges));
    }

    #[test]
    fn validate_rejects_bad_fields() {
        let mut p = TagProfile::identity(3);
        p.iq_gain_imbalance = 0.0;
        assert!(p.validate().is_err());
        let mut p = TagProfile::identity(3);
        p.phase_noise_std_rad = -1e-3;
        assert!(p.validate().is_err());
        let mut p = TagProfile::identity(3);
        p.rise_time_samples = -0.5;
        assert!(p.validate().is_err());
        TagProfile::identity(3).validate().unwrap();
    }
}
