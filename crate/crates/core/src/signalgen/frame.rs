//! RN16 reply framing and FM0 line coding.

use rand::Rng;

use super::SignalError;

/// Default backscatter link frequency.
pub const DEFAULT_BLF_HZ: f64 = 40_000.0;

/// FM0 preamble `1 0 1 0 v 1` as half-bit levels. The fifth symbol is the
/// violation: no boundary inversion and no mid-bit inversion.
pub const FM0_PREAMBLE_HALVES: [i8; 12] = [1, 1, -1, 1, -1, -1, 1, -1, -1, -1, 1, 1];

/// Number of symbols in the FM0 preamble.
pub const PREAMBLE_SYMBOLS: usize = FM0_PREAMBLE_HALVES.len() / 2;

/// Nominal preamble bits, with the violation symbol written as `0`.
pub const PREAMBLE_BITS: [bool; PREAMBLE_SYMBOLS] = [true, false, true, false, false, true];

/// One tag reply slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Rn16Frame {
    pub payload_bits: [bool; 16],
    pub preamble_bits: [bool; PREAMBLE_SYMBOLS],
    /// Optional CRC-5 over the payload, appended after it when present.
    pub crc5: Option<[bool; 5]>,
    pub blf_hz: f64,
}

impl Rn16Frame {
    /// Symbols following the preamble: payload, optional CRC-5, dummy `1`.
    pub fn data_bits(&self) -> Vec<bool> {
        let mut bits = self.payload_bits.to_vec();
        if let Some(crc) = self.crc5 {
            bits.extend_from_slice(&crc);
        }
        bits.push(true);
        bits
    }

    /// Total symbol count including preamble and dummy bit.
    pub fn symbol_count(&self) -> usize {
        PREAMBLE_SYMBOLS + self.data_bits().len()
    }

    pub fn payload_value(&self) -> u16 {
        self.payload_bits
            .iter()
            .fold(0u16, |acc, &b| (acc << 1) | u16::from(b))
    }
}

/// Draws a fresh RN16 reply. With `with_crc5` the EPC-Gen2 CRC-5 of the
/// payload is attached.
pub fn generate_rn16<R: Rng + ?Sized>(rng: &mut R, with_crc5: bool) -> Rn16Frame {
    let mut payload_bits = [false; 16];
    for b in payload_bits.iter_mut() {
        *b = rng.random();
    }
    Rn16Frame {
        payload_bits,
        preamble_bits: PREAMBLE_BITS,
        crc5: with_crc5.then(|| crc5(&payload_bits)),
        blf_hz: DEFAULT_BLF_HZ,
    }
}

/// EPC-Gen2 CRC-5: polynomial x^5 + x^3 + 1, preset `01001`, MSB first.
pub fn crc5(bits: &[bool]) -> [bool; 5] {
    let mut reg: u8 = 0b01001;
    for &bit in bits {
        let feedback = ((reg >> 4) & 1) ^ u8::from(bit);
        reg = (reg << 1) & 0x1f;
        if feedback == 1 {
            reg ^= 0b01001;
        }
    }
    let mut out = [false; 5];
    for (i, o) in out.iter_mut().enumerate() {
        *o = (reg >> (4 - i)) & 1 == 1;
    }
    out
}

/// FM0 baseband of one reply, zero-padded or truncated to the communication
/// length.
#[derive(Debug, Clone, PartialEq)]
pub struct Baseband {
    pub samples: Vec<f64>,
    /// Samples carrying the reply; everything after is zero padding.
    pub active_len: usize,
}

/// Half-bit levels of a frame: fixed preamble followed by FM0-coded data.
pub fn fm0_half_levels(frame: &Rn16Frame) -> Vec<i8> {
    let mut halves = FM0_PREAMBLE_HALVES.to_vec();
    let mut level = *halves.last().expect("preamble is non-empty");
    for bit in frame.data_bits() {
        // every symbol boundary inverts
        level = -level;
        halves.push(level);
        if !bit {
            level = -level;
        }
        halves.push(level);
    }
    halves
}

/// Encodes `frame` as a ±1 FM0 baseband at `sample_rate_hz`.
///
/// One symbol spans `sample_rate_hz / blf_hz` samples; sample `n` takes the
/// level of the half-bit containing time `n / sample_rate_hz`.
pub fn fm0_encode(
    frame: &Rn16Frame,
    sample_rate_hz: f64,
    comm_len: usize,
) -> Result<Baseband, SignalError> {
    if !(sample_rate_hz >= 2.0 * frame.blf_hz) || !(frame.blf_hz > 0.0) {
        return Err(SignalError::BelowNyquist {
            sample_rate_hz,
            blf_hz: frame.blf_hz,
        });
    }
    let halves = fm0_half_levels(frame);
    let samples_per_half = sample_rate_hz / frame.blf_hz / 2.0;
    let signal_len = (halves.len() as f64 * samples_per_half).round() as usize;
    let active_len = signal_len.min(comm_len);
    let mut samples = vec![0.0; comm_len];
    for (n, s) in samples.iter_mut().enumerate().take(active_len) {
        let half = ((n as f64 / samples_per_half).floor() as usize).min(halves.len() - 1);
        *s = f64::from(halves[half]);
    }
    Ok(Baseband {
        samples,
        active_len,
    })
}

/// Samples per FM0 symbol.
pub fn samples_per_bit(sample_rate_hz: f64, blf_hz: f64) -> f64 {
    sample_rate_hz / blf_hz
}
