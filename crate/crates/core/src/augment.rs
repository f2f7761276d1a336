//! Reader-side AWGN augmentation.
//!
//! For every coefficient φ each slice gets a noisy copy whose per-column noise
//! standard deviation is φ times that column's mean absolute value. The result
//! is the original slices followed by one block per coefficient.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datapipe::SliceExample;
use crate::rng::{purpose, substream};

pub const DEFAULT_PHI: [f64; 4] = [0.20, 0.10, 0.05, 0.01];

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("perturbation coefficient {0} is negative or not finite")]
    InvalidCoefficient(f64),
    #[error("slice {index} contains non-finite samples")]
    NonFinite { index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub phi: Vec<f64>,
    pub seed: u64,
}

impl AugmentConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            phi: DEFAULT_PHI.to_vec(),
            seed,
        }
    }

    /// Parses `"0.2,0.1"` style coefficient lists; an empty string gives no
    /// coefficients.
    pub fn parse_phi(text: &str) -> Result<Vec<f64>, String> {
        let text = text.trim().trim_start_matches("phi=");
        if text.is_empty() {
            return Ok(Vec::new());
        }
        text.split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|e| format!("bad coefficient {s:?}: {e}")))
            .collect()
    }
}

/// Mean absolute value of column `c` of an `L × 2` row-major slice.
pub fn column_scale(data: &[f32], c: usize) -> f64 {
    let n = data.len() / 2;
    if n == 0 {
        return 0.0;
    }
    data.iter().skip(c).step_by(2).map(|v| f64::from(v.abs())).sum::<f64>() / n as f64
}

pub fn augment_slices(slices: &[SliceExample], cfg: &AugmentConfig) -> Result<Vec<SliceExample>, AugmentError> {
    if let Some(&bad) = cfg.phi.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
        return Err(AugmentError::InvalidCoefficient(bad));
    }
    if let Some(index) = slices.iter().position(|s| !s.is_finite()) {
        return Err(AugmentError::NonFinite { index });
    }
    let mut out = Vec::with_capacity(slices.len() * (1 + cfg.phi.len()));
    out.extend_from_slice(slices);
    let scales: Vec<[f64; 2]> = slices
        .iter()
        .map(|s| [column_scale(&s.data, 0), column_scale(&s.data, 1)])
        .collect();
    for (k, &phi) in cfg.phi.iter().enumerate() {
        for (i, (s, scale)) in slices.iter().zip(&scales).enumerate() {
            let mut rng = substream(cfg.seed, &[purpose::AUGMENT, k as u64, i as u64]);
            let sigma = [phi * scale[0], phi * scale[1]];
            let mut noisy = s.clone();
            for pair in noisy.data.chunks_exact_mut(2) {
                for (v, sd) in pair.iter_mut().zip(sigma) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    if sd > 0.0 {
                        *v = (f64::from(*v) + sd * z) as f32;
                    }
                }
            }
            out.push(noisy);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn slice(data: Vec<f32>, label: u32) -> SliceExample {
        SliceExample {
            data,
            label,
            scenario_name: "s".into(),
            comm_index: 0,
            slice_index: 0,
        }
    }

    fn ramp(n: usize, label: u32) -> SliceExample {
        slice((0..2 * n).map(|i| ((i as f32) * 0.37).sin()).collect(), label)
    }

    #[test]
    fn empty_coefficients_are_a_no_op() {
        let xs: Vec<_> = (0..5).map(|i| ramp(8, i)).collect();
        let cfg = AugmentConfig { phi: vec![], seed: 1 };
        assert_eq!(augment_slices(&xs, &cfg).unwrap(), xs);
    }

    #[test]
    fn default_family_quintuples() {
        let xs: Vec<_> = (0..100).map(|i| ramp(16, i % 4)).collect();
        let out = augment_slices(&xs, &AugmentConfig::new(3)).unwrap();
        assert_eq!(out.len(), 500);
        assert_eq!(&out[..100], &xs[..]);
        for (j, s) in out.iter().enumerate() {
            assert_eq!(s.label, xs[j % 100].label);
            assert_eq!(s.data.len(), 32);
        }
    }

    #[test]
    fn negative_coefficient_rejected() {
        let cfg = AugmentConfig { phi: vec![0.1, -0.01], seed: 0 };
        assert_eq!(
            augment_slices(&[ramp(4, 0)], &cfg),
            Err(AugmentError::InvalidCoefficient(-0.01))
        );
    }

    #[test]
    fn zero_coefficient_reproduces_originals() {
        let xs = vec![ramp(32, 0), ramp(32, 1)];
        let cfg = AugmentConfig { phi: vec![0.0], seed: 9 };
        let out = augment_slices(&xs, &cfg).unwrap();
        assert_eq!(&out[2..], &xs[..]);
    }

    #[test]
    fn noise_level_and_independence() {
        // one slice replicated so that every draw sees the same scale
        let base = slice(vec![0.5, -0.25], 0);
        let xs = vec![base.clone(); 10_000];
        let cfg = AugmentConfig { phi: vec![0.10], seed: 42 };
        let out = augment_slices(&xs, &cfg).unwrap();
        let d0: Vec<f64> = out[10_000..].iter().map(|s| f64::from(s.data[0] - base.data[0])).collect();
        let d1: Vec<f64> = out[10_000..].iter().map(|s| f64::from(s.data[1] - base.data[1])).collect();
        let std = |d: &[f64]| {
            let m = d.iter().sum::<f64>() / d.len() as f64;
            (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt()
        };
        let s0 = std(&d0);
        assert!((s0 / 0.05 - 1.0).abs() < 0.03, "{s0}");
        assert!((std(&d1) / 0.025 - 1.0).abs() < 0.03);
        let m0 = d0.iter().sum::<f64>() / d0.len() as f64;
        let m1 = d1.iter().sum::<f64>() / d1.len() as f64;
        let cov: f64 = d0.iter().zip(&d1).map(|(a, b)| (a - m0) * (b - m1)).sum::<f64>() / d0.len() as f64;
        let corr = cov / (s0 * std(&d1));
        assert!(corr.abs() < 0.05, "{corr}");
    }

    #[test]
    fn same_seed_same_output() {
        let xs: Vec<_> = (0..10).map(|i| ramp(8, i)).collect();
        let cfg = AugmentConfig::new(5);
        assert_eq!(augment_slices(&xs, &cfg).unwrap(), augment_slices(&xs, &cfg).unwrap());
    }

    #[test]
    fn parse_coefficients() {
        assert_eq!(AugmentConfig::parse_phi("phi=0.20,0.10").unwrap(), vec![0.2, 0.1]);
        assert!(AugmentConfig::parse_phi("").unwrap().is_empty());
        assert!(AugmentConfig::parse_phi("0.1,x").is_err());
    }

    proptest! {
        #[test]
        fn labels_and_shapes_preserved(
            n in 1usize..8,
            len in 1usize..16,
            phi in proptest::collection::vec(0.0f64..0.5, 0..4),
            seed in any::<u64>(),
        ) {
            let xs: Vec<_> = (0..n).map(|i| ramp(len, i as u32)).collect();
            let out = augment_slices(&xs, &AugmentConfig { phi: phi.clone(), seed }).unwrap();
            prop_assert_eq!(out.len(), n * (1 + phi.len()));
            for (j, s) in out.iter().enumerate() {
                prop_assert_eq!(s.label, xs[j % n].label);
                prop_assert_eq!(s.data.len(), 2 * len);
            }
        }
    }
}
