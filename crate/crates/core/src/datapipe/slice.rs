use crate::signalgen::IQWaveform;

use super::DataError;

/// Identity of the communication a slice was cut from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CommKey {
    pub scenario: String,
    pub tag_id: u32,
    pub comm_index: u32,
}

/// One classifier input: an `L × 2` window (column 0 = I, column 1 = Q)
/// stored row-major, with its tag label.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceExample {
    pub data: Vec<f32>,
    pub label: u32,
    pub scenario_name: String,
    pub comm_index: u32,
    /// Position of the window within its communication.
    pub slice_index: u32,
}

impl SliceExample {
    /// Window length `L`.
    pub fn window(&self) -> usize {
        self.data.len() / 2
    }

    pub fn column(&self, c: usize) -> impl Iterator<Item = f32> + '_ {
        self.data.iter().skip(c).step_by(2).copied()
    }

    pub fn comm_key(&self) -> CommKey {
        CommKey {
            scenario: self.scenario_name.clone(),
            tag_id: self.label,
            comm_index: self.comm_index,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SliceOptions {
    /// Per-slice standardisation: remove each column's mean and divide by
    /// the slice RMS. Off by default; the model sees raw amplitudes.
    pub standardize: bool,
}

/// Cuts `floor(len / window)` contiguous, non-overlapping windows; the
/// remainder is dropped. A window longer than the waveform yields nothing.
pub fn slice_waveform(wave: &IQWaveform, window: usize) -> Result<Vec<SliceExample>, DataError> {
    slice_waveform_with(wave, window, SliceOptions::default())
}

pub fn slice_waveform_with(
    wave: &IQWaveform,
    window: usize,
    opts: SliceOptions,
) -> Result<Vec<SliceExample>, DataError> {
    if window == 0 {
        return Err(DataError::InvalidWindow(window));
    }
    let out = wave
        .samples
        .chunks_exact(window)
        .enumerate()
        .map(|(i, chunk)| {
            let mut data = Vec::with_capacity(2 * window);
            for z in chunk {
                data.push(z.re);
                data.push(z.im);
            }
            if opts.standardize {
                standardize(&mut data);
            }
            SliceExample {
                data,
                label: wave.tag_id,
                scenario_name: wave.scenario_name.clone(),
                comm_index: wave.comm_index,
                slice_index: i as u32,
            }
        })
        .collect();
    Ok(out)
}

fn standardize(data: &mut [f32]) {
    let n = (data.len() / 2) as f64;
    let mean = |c: usize, d: &[f32]| d.iter().skip(c).step_by(2).map(|&x| f64::from(x)).sum::<f64>() / n;
    let (mi, mq) = (mean(0, data), mean(1, data));
    for (k, x) in data.iter_mut().enumerate() {
        *x -= if k % 2 == 0 { mi } else { mq } as f32;
    }
    let rms = (data.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>() / n).sqrt();
    if rms > 0.0 {
        for x in data.iter_mut() {
            *x = (f64::from(*x) / rms) as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex32;

    fn wave(len: usize) -> IQWaveform {
        IQWaveform {
            samples: (0..len).map(|i| Complex32::new(i as f32, -(i as f32))).collect(),
            sample_rate_hz: 5e6,
            tag_id: 4,
            scenario_name: "SCEN-020-OTA".into(),
            comm_index: 9,
            active_len: len,
        }
    }

    #[test]
    fn slice_counts() {
        let w = wave(3400);
        assert_eq!(slice_waveform(&w, 1024).unwrap().len(), 3);
        assert_eq!(slice_waveform(&w, 3072).unwrap().len(), 1);
        assert_eq!(slice_waveform(&w, 3401).unwrap().len(), 0);
        let full = slice_waveform(&w, 3400).unwrap();
        assert_eq!(full.len(), 1);
        assert_eq!(full[0].window(), 3400);
        assert!(matches!(slice_waveform(&w, 0), Err(DataError::InvalidWindow(0))));
    }

    #[test]
    fn columns_hold_real_and_imaginary_parts() {
        let s = slice_waveform(&wave(3400), 1024).unwrap();
        assert_eq!(s[1].slice_index, 1);
        let re: Vec<f32> = s[1].column(0).collect();
        let im: Vec<f32> = s[1].column(1).collect();
        assert_eq!(re[0], 1024.0);
        assert_eq!(im[5], -1029.0);
        assert_eq!(s[2].label, 4);
        assert_eq!(s[2].comm_key().comm_index, 9);
    }

    #[test]
    fn standardized_slice_has_zero_mean_unit_rms() {
        let s = slice_waveform_with(&wave(64), 32, SliceOptions { standardize: true }).unwrap();
        let mean: f32 = s[0].column(0).sum::<f32>() / 32.0;
        assert!(mean.abs() < 1e-5);
        let rms = (s[0].data.iter().map(|x| x * x).sum::<f32>() / 32.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-5);
    }
}
