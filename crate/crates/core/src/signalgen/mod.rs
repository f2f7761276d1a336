//! Synthetic RN16 backscatter corpora.
//!
//! A communication is built as: random RN16 payload → FM0 baseband → tag
//! impairments ([`apply_impairments`]) → per-placement carrier phase and gain
//! → scenario channel ([`apply_channel`]) → quantisation to `f32` I/Q.

mod channel;
mod frame;
mod impair;
mod profile;
mod scenario;

use std::collections::HashSet;
use std::f64::consts::PI;

use num_complex::{Complex32, Complex64};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use channel::{active_power, apply_channel};
pub use frame::{
    crc5, fm0_encode, fm0_half_levels, generate_rn16, samples_per_bit, Baseband, Rn16Frame, DEFAULT_BLF_HZ,
    FM0_PREAMBLE_HALVES, PREAMBLE_BITS, PREAMBLE_SYMBOLS,
};
pub use impair::{apply_impairments, memoryless_nonlinearity, smooth_edges};
pub use profile::{draw_profile, generate_population, ImpairmentRanges, TagProfile};
pub use scenario::{
    ChannelScenario, Interferer, LinkTiming, Obstacle, ScenarioCatalog, ScenarioCode, FAT_DB_PER_CM,
    MUSCLE_DB_PER_CM, REFERENCE_DISTANCE_CM,
};

use crate::rng::{label_of, purpose, substream};

pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 5e6;
pub const DEFAULT_COMM_LEN: usize = 3400;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("sample rate {sample_rate_hz} Hz is below Nyquist for BLF {blf_hz} Hz")]
    BelowNyquist { sample_rate_hz: f64, blf_hz: f64 },
    #[error("invalid profile for tag {tag_id}: {what}")]
    InvalidProfile { tag_id: u32, what: &'static str },
    #[error("non-finite sample at index {index} after {stage}")]
    NonFinite { stage: &'static str, index: usize },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("SNR is undefined for an all-zero signal")]
    ZeroSignalPower,
    #[error("duplicate tag_id {0}")]
    DuplicateTag(u32),
    #[error("{0}")]
    InvalidRequest(String),
    #[error("scenario catalog: {0}")]
    Catalog(String),
}

/// Complex signal in the analog domain, before quantisation.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    pub samples: Vec<Complex64>,
    pub active_len: usize,
    pub sample_rate_hz: f64,
}

/// One captured communication: `f32` I/Q samples with its tag label.
#[derive(Debug, Clone, PartialEq)]
pub struct IQWaveform {
    pub samples: Vec<Complex32>,
    pub sample_rate_hz: f64,
    pub tag_id: u32,
    pub scenario_name: String,
    /// Position of this communication within its (tag, scenario) capture.
    pub comm_index: u32,
    /// Samples carrying the reply; the rest is padding.
    pub active_len: usize,
}

impl IQWaveform {
    pub fn from_signal(signal: &Signal, tag_id: u32, scenario_name: &str, comm_index: u32) -> Self {
        Self {
            samples: signal
                .samples
                .iter()
                .map(|z| Complex32::new(z.re as f32, z.im as f32))
                .collect(),
            sample_rate_hz: signal.sample_rate_hz,
            tag_id,
            scenario_name: scenario_name.to_string(),
            comm_index,
            active_len: signal.active_len,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// Static geometry of one tag in one scenario: the round-trip carrier phase
/// and antenna-coupling gain seen by the reader.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub phase_rad: f64,
    pub gain: f64,
}

impl Placement {
    pub const NEUTRAL: Placement = Placement {
        phase_rad: 0.0,
        gain: 1.0,
    };

    pub fn factor(&self) -> Complex64 {
        Complex64::from_polar(self.gain, self.phase_rad)
    }
}

/// Knobs of corpus synthesis that are not part of the scenario itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub sample_rate_hz: f64,
    pub comm_len: usize,
    pub blf_hz: f64,
    pub with_crc5: bool,
    /// Draw a placement per (tag, scenario). Off means every tag sits at
    /// the neutral placement.
    pub tag_placement: bool,
    /// Relative spread of the placement gain, `gain ∈ [1 - s, 1 + s]`.
    pub placement_gain_spread: f64,
    /// Half-width of the placement phase, `phase ∈ [-s, s]` radians; π
    /// covers the whole circle.
    pub placement_phase_spread: f64,
    /// Overrides the scenario seed for payload draws only.
    pub payload_seed: Option<u64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            comm_len: DEFAULT_COMM_LEN,
            blf_hz: DEFAULT_BLF_HZ,
            with_crc5: false,
            tag_placement: true,
            placement_gain_spread: 0.2,
            placement_phase_spread: 0.3,
            payload_seed: None,
        }
    }
}

/// Placement of `tag_id` in `scenario`, fixed by the scenario seed.
pub fn placement_for(scenario: &ChannelScenario, tag_id: u32, cfg: &SynthConfig) -> Placement {
    if !cfg.tag_placement {
        return Placement::NEUTRAL;
    }
    let mut rng = substream(
        scenario.seed,
        &[purpose::PLACEMENT, label_of(&scenario.name), u64::from(tag_id)],
    );
    let p = cfg.placement_phase_spread.clamp(0.0, PI);
    let phase_rad = if p > 0.0 { rng.random_range(-p..p) } else { 0.0 };
    let s = cfg.placement_gain_spread.clamp(0.0, 0.99);
    let gain = if s > 0.0 { rng.random_range(1.0 - s..1.0 + s) } else { 1.0 };
    Placement { phase_rad, gain }
}

/// Synthesizes one communication of `profile` through the full chain.
pub fn synthesize_communication<R: Rng + ?Sized>(
    frame: &Rn16Frame,
    profile: &TagProfile,
    placement: Placement,
    scenario: &ChannelScenario,
    cfg: &SynthConfig,
    impair_rng: &mut R,
    channel_rng: &mut R,
) -> Result<Signal, SignalError> {
    let bb = fm0_encode(frame, cfg.sample_rate_hz, cfg.comm_len)?;
    let mut sig = apply_impairments(&bb, profile, cfg.sample_rate_hz, impair_rng)?;
    if placement != Placement::NEUTRAL {
        let f = placement.factor();
        for z in sig.samples.iter_mut() {
            *z *= f;
        }
    }
    apply_channel(sig, scenario, channel_rng)
}

/// Generates `comms_per_tag` labelled communications per profile.
///
/// Output is ordered by profile then communication index. Each tag draws
/// from its own substreams of the scenario seed, so the corpus depends only
/// on `(scenario, profiles, cfg)`.
pub fn synthesize_scenario(
    profiles: &[TagProfile],
    scenario: &ChannelScenario,
    comms_per_tag: usize,
    cfg: &SynthConfig,
) -> Result<Vec<IQWaveform>, SignalError> {
    if comms_per_tag == 0 {
        return Err(SignalError::InvalidRequest("comms_per_tag must be at least 1".into()));
    }
    if profiles.is_empty() {
        return Err(SignalError::InvalidRequest("no tag profiles".into()));
    }
    let mut seen = HashSet::new();
    for p in profiles {
        if !seen.insert(p.tag_id) {
            return Err(SignalError::DuplicateTag(p.tag_id));
        }
        p.validate()?;
    }
    scenario.validate()?;

    let scen = label_of(&scenario.name);
    let payload_root = cfg.payload_seed.unwrap_or(scenario.seed);
    let mut out = Vec::with_capacity(profiles.len() * comms_per_tag);
    for profile in profiles {
        let tag = u64::from(profile.tag_id);
        let mut payload_rng = substream(payload_root, &[purpose::PAYLOAD, scen, tag]);
        let mut impair_rng = substream(scenario.seed, &[purpose::IMPAIRMENT, scen, tag]);
        let mut channel_rng = substream(scenario.seed, &[purpose::CHANNEL, scen, tag]);
        let placement = placement_for(scenario, profile.tag_id, cfg);
        for comm in 0..comms_per_tag {
            let mut frame = generate_rn16(&mut payload_rng, cfg.with_crc5);
            frame.blf_hz = cfg.blf_hz;
            let sig = synthesize_communication(
                &frame,
                profile,
                placement,
                scenario,
                cfg,
                &mut impair_rng,
                &mut channel_rng,
            )?;
            out.push(IQWaveform::from_signal(&sig, profile.tag_id, &scenario.name, comm as u32));
        }
    }
    Ok(out)
}
