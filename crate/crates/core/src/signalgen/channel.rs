//! Propagation and interference between tag and reader.

use std::f64::consts::TAU;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::scenario::ChannelScenario;
use super::{Signal, SignalError};

/// Mean power over the reply region (padding excluded).
pub fn active_power(signal: &Signal) -> f64 {
    let active = &signal.samples[..signal.active_len.min(signal.samples.len())];
    if active.is_empty() {
        return 0.0;
    }
    active.iter().map(|z| z.norm_sqr()).sum::<f64>() / active.len() as f64
}

/// Applies path loss, obstacle attenuation, interfering tones and AWGN.
///
/// Interferer powers and the SNR are both measured against the attenuated
/// signal power over the reply region.
pub fn apply_channel<R: Rng + ?Sized>(
    mut signal: Signal,
    scenario: &ChannelScenario,
    rng: &mut R,
) -> Result<Signal, SignalError> {
    scenario.validate()?;
    let gain = scenario.amplitude_gain();
    if gain != 1.0 {
        for z in signal.samples.iter_mut() {
            *z *= gain;
        }
    }

    let needs_reference = scenario.snr_db.is_finite() || !scenario.interferers.is_empty();
    if !needs_reference {
        return Ok(signal);
    }
    let power = active_power(&signal);
    if !(power > 0.0) {
        return Err(SignalError::ZeroSignalPower);
    }

    for tone in &scenario.interferers {
        let amp = (power * 10f64.powf(tone.relative_power_db / 10.0)).sqrt();
        let phase0 = rng.random_range(0.0..TAU);
        let step = TAU * tone.freq_hz / signal.sample_rate_hz;
        for (n, z) in signal.samples.iter_mut().enumerate() {
            *z += Complex64::from_polar(amp, phase0 + step * n as f64);
        }
    }

    if scenario.snr_db.is_finite() {
        let noise_power = power / 10f64.powf(scenario.snr_db / 10.0);
        let sigma = (noise_power / 2.0).sqrt();
        for z in signal.samples.iter_mut() {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            *z += Complex64::new(sigma * re, sigma * im);
        }
    }
    Ok(signal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::signalgen::scenario::Obstacle;

    fn tone_signal() -> Signal {
        let samples = (0..3400)
            .map(|n| {
                if n < 2875 {
                    Complex64::from_polar(1.0, 0.01 * n as f64)
                } else {
                    Complex64::new(0.0, 0.0)
                }
            })
            .collect();
        Signal {
            samples,
            active_len: 2875,
            sample_rate_hz: 5e6,
        }
    }

    fn noiseless(distance: f64, obstacle: Obstacle) -> ChannelScenario {
        ChannelScenario::new(distance, obstacle, f64::INFINITY, vec![], 1).unwrap()
    }

    #[test]
    fn reference_channel_is_identity() {
        let s = tone_signal();
        let out = apply_channel(s.clone(), &ChannelScenario::reference(0), &mut substream(0, &[])).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn distance_scales_amplitude() {
        let s = tone_signal();
        let near = apply_channel(s.clone(), &noiseless(20.0, Obstacle::None), &mut substream(0, &[])).unwrap();
        let far = apply_channel(s, &noiseless(100.0, Obstacle::None), &mut substream(0, &[])).unwrap();
        for (a, b) in near.samples.iter().zip(&far.samples).take(2875) {
            assert!((b.norm() / a.norm() - 0.2).abs() < 1e-9);
        }
    }

    #[test]
    fn tissue_attenuation_in_db() {
        let s = tone_signal();
        let p0 = active_power(&s);
        let slab = Obstacle::Tissue {
            thickness_cm: 3.0,
            atten_db_per_cm: 1.6,
        };
        let out = apply_channel(s, &noiseless(20.0, slab), &mut substream(0, &[])).unwrap();
        let drop_db = 10.0 * (p0 / active_power(&out)).log10();
        assert!((drop_db - 4.8).abs() < 0.01, "{drop_db}");
    }

    #[test]
    fn awgn_meets_requested_snr() {
        let scenario = ChannelScenario::new(50.0, Obstacle::None, 10.0, vec![], 5).unwrap();
        let mut rng = substream(3, &[]);
        for _ in 0..100 {
            let clean = apply_channel(tone_signal(), &noiseless(50.0, Obstacle::None), &mut rng).unwrap();
            let noisy = apply_channel(tone_signal(), &scenario, &mut rng).unwrap();
            let noise: f64 = noisy
                .samples
                .iter()
                .zip(&clean.samples)
                .take(2875)
                .map(|(a, b)| (a - b).norm_sqr())
                .sum::<f64>()
                / 2875.0;
            let snr = 10.0 * (active_power(&clean) / noise).log10();
            assert!((snr - 10.0).abs() <= 0.5, "{snr}");
        }
    }

    #[test]
    fn interferer_power_is_relative() {
        let scenario = ChannelScenario::new(
            20.0,
            Obstacle::None,
            f64::INFINITY,
            vec![crate::signalgen::Interferer {
                freq_hz: 250e3,
                relative_power_db: -10.0,
            }],
            5,
        )
        .unwrap();
        let out = apply_channel(tone_signal(), &scenario, &mut substream(1, &[])).unwrap();
        // padding region holds the tone alone
        let tail: f64 = out.samples[2875..].iter().map(|z| z.norm_sqr()).sum::<f64>() / 525.0;
        assert!((tail - 0.1).abs() < 1e-9, "{tail}");
    }

    #[test]
    fn zero_signal_is_rejected() {
        let s = Signal {
            samples: vec![Complex64::new(0.0, 0.0); 10],
            active_len: 10,
            sample_rate_hz: 5e6,
        };
        let scenario = ChannelScenario::new(20.0, Obstacle::None, 10.0, vec![], 5).unwrap();
        assert!(matches!(
            apply_channel(s.clone(), &scenario, &mut substream(1, &[])),
            Err(SignalError::ZeroSignalPower)
        ));
        // without noise or tones the reference is never needed
        assert!(apply_channel(s, &ChannelScenario::reference(0), &mut substream(1, &[])).is_ok());
    }
}
