//! Tag front-end impairment chain.

use std::f64::consts::TAU;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::frame::Baseband;
use super::profile::TagProfile;
use super::{Signal, SignalError};

fn check(samples: &[Complex64], stage: &'static str) -> Result<(), SignalError> {
    match samples.iter().position(|z| !z.re.is_finite() || !z.im.is_finite()) {
        Some(index) => Err(SignalError::NonFinite { stage, index }),
        None => Ok(()),
    }
}

fn check_real(samples: &[f64], stage: &'static str) -> Result<(), SignalError> {
    match samples.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(SignalError::NonFinite { stage, index }),
        None => Ok(()),
    }
}

/// One-pole low-pass standing in for finite switching edges.
pub fn smooth_edges(x: &[f64], rise_time_samples: f64) -> Vec<f64> {
    let alpha = 1.0 / (1.0 + rise_time_samples);
    let mut y = Vec::with_capacity(x.len());
    let mut state = 0.0;
    for &v in x {
        state += alpha * (v - state);
        y.push(state);
    }
    y
}

/// `x + c2 x^2 + c3 x^3 + ...`
pub fn memoryless_nonlinearity(x: &[f64], coeffs: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let mut acc = v;
            let mut pow = v;
            for &c in coeffs {
                pow *= v;
                acc += c * pow;
            }
            acc
        })
        .collect()
}

/// Applies a tag's impairments to an FM0 baseband, in order: edge smoothing,
/// nonlinearity, CFO up-conversion, phase-noise walk, I/Q imbalance and DC
/// offset.
pub fn apply_impairments<R: Rng + ?Sized>(
    baseband: &Baseband,
    profile: &TagProfile,
    sample_rate_hz: f64,
    rng: &mut R,
) -> Result<Signal, SignalError> {
    profile.validate()?;
    check_real(&baseband.samples, "baseband")?;

    let smoothed = if profile.rise_time_samples > 0.0 {
        smooth_edges(&baseband.samples, profile.rise_time_samples)
    } else {
        baseband.samples.clone()
    };
    check_real(&smoothed, "edge smoothing")?;

    let shaped = memoryless_nonlinearity(&smoothed, &profile.harmonic_coeffs);
    check_real(&shaped, "nonlinearity")?;

    let step = TAU * profile.cfo_hz / sample_rate_hz;
    let mut z: Vec<Complex64> = shaped
        .iter()
        .enumerate()
        .map(|(n, &x)| Complex64::from_polar(x, step * n as f64))
        .collect();
    check(&z, "cfo up-conversion")?;

    if profile.phase_noise_std_rad > 0.0 {
        let walk = Normal::new(0.0, profile.phase_noise_std_rad).map_err(|_| SignalError::InvalidProfile {
            tag_id: profile.tag_id,
            what: "phase noise deviation",
        })?;
        let mut phase = 0.0;
        for s in z.iter_mut().skip(1) {
            phase += walk.sample(rng);
            *s *= Complex64::from_polar(1.0, phase);
        }
        check(&z, "phase noise")?;
    }

    let (sin_p, cos_p) = profile.iq_phase_imbalance_rad.sin_cos();
    let g = profile.iq_gain_imbalance;
    if g != 1.0 || profile.iq_phase_imbalance_rad != 0.0 {
        for s in z.iter_mut() {
            let (i, q) = (s.re, s.im);
            *s = Complex64::new(g * i, q * cos_p - i * sin_p);
        }
        check(&z, "iq imbalance")?;
    }

    if profile.dc_offset != Complex64::new(0.0, 0.0) {
        for s in z.iter_mut() {
            *s += profile.dc_offset;
        }
        check(&z, "dc offset")?;
    }

    Ok(Signal {
        samples: z,
        active_len: baseband.active_len,
        sample_rate_hz,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::signalgen::frame::{fm0_encode, generate_rn16};

    fn baseband() -> Baseband {
        let frame = generate_rn16(&mut substream(1, &[]), false);
        fm0_encode(&frame, 5e6, 3400).unwrap()
    }

    #[test]
    fn identity_profile_is_pass_through() {
        let bb = baseband();
        let out = apply_impairments(&bb, &TagProfile::identity(0), 5e6, &mut substream(2, &[])).unwrap();
        assert_eq!(out.active_len, bb.active_len);
        for (z, &x) in out.samples.iter().zip(&bb.samples) {
            assert_eq!(*z, Complex64::new(x, 0.0));
        }
    }

    #[test]
    fn cfo_advances_phase_linearly() {
        let bb = baseband();
        let mut p = TagProfile::identity(0);
        p.cfo_hz = 1000.0;
        let out = apply_impairments(&bb, &p, 5e6, &mut substream(2, &[])).unwrap();
        for n in (0..bb.active_len).step_by(97) {
            let expected = Complex64::from_polar(bb.samples[n], TAU * 1000.0 * n as f64 / 5e6);
            assert!((out.samples[n] - expected).norm() < 1e-12, "n={n}");
        }
    }

    #[test]
    fn dc_offset_on_silence() {
        let bb = Baseband {
            samples: vec![0.0; 64],
            active_len: 64,
        };
        let mut p = TagProfile::identity(0);
        p.dc_offset = Complex64::new(0.1, 0.0);
        let out = apply_impairments(&bb, &p, 5e6, &mut substream(2, &[])).unwrap();
        assert!(out.samples.iter().all(|&z| z == Complex64::new(0.1, 0.0)));
    }

    #[test]
    fn iq_imbalance_scales_and_skews() {
        let bb = Baseband {
            samples: vec![1.0; 4],
            active_len: 4,
        };
        let mut p = TagProfile::identity(0);
        p.iq_gain_imbalance = 1.1;
        p.iq_phase_imbalance_rad = 0.05;
        let out = apply_impairments(&bb, &p, 5e6, &mut substream(2, &[])).unwrap();
        assert!((out.samples[0].re - 1.1).abs() < 1e-15);
        assert!((out.samples[0].im + 0.05f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn smoothing_converges_to_step() {
        let y = smooth_edges(&[1.0; 200], 4.0);
        assert!((y[0] - 0.2).abs() < 1e-15);
        assert!((y[199] - 1.0).abs() < 1e-12);
        assert_eq!(smooth_edges(&[1.0, -1.0], 0.0), vec![1.0, -1.0]);
    }

    #[test]
    fn nonlinearity_polynomial() {
        let y = memoryless_nonlinearity(&[2.0], &[0.5, 0.25]);
        assert!((y[0] - (2.0 + 0.5 * 4.0 + 0.25 * 8.0)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_stage_is_reported() {
        let bb = Baseband {
            samples: vec![1e200; 4],
            active_len: 4,
        };
        let mut p = TagProfile::identity(0);
        p.harmonic_coeffs = vec![0.0, 1.0];
        let err = apply_impairments(&bb, &p, 5e6, &mut substream(2, &[])).unwrap_err();
        assert!(matches!(err, SignalError::NonFinite { stage: "nonlinearity", index: 0 }));
    }

    #[test]
    fn phase_noise_preserves_magnitude() {
        let bb = baseband();
        let mut p = TagProfile::identity(0);
        p.phase_noise_std_rad = 1e-3;
        let out = apply_impairments(&bb, &p, 5e6, &mut substream(2, &[])).unwrap();
        for (z, &x) in out.samples.iter().zip(&bb.samples) {
            assert!((z.norm() - x.abs()).abs() < 1e-12);
        }
        assert!(out.samples[1000].im != 0.0);
    }
}
