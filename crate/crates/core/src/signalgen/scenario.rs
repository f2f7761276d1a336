//! Channel scenarios, the `SCEN-dist-obst` name codec and scenario catalogs.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SignalError;

/// Reference distance at which the channel leaves amplitude unchanged.
pub const REFERENCE_DISTANCE_CM: f64 = 20.0;
/// Fat tissue attenuation (PM0 analog).
pub const FAT_DB_PER_CM: f64 = 0.9;
/// Muscle tissue attenuation (PM1 analog).
pub const MUSCLE_DB_PER_CM: f64 = 1.6;
pub const PM0_THICKNESS_CM: f64 = 0.5;
pub const PM1_THICKNESS_CM: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Obstacle {
    None,
    Tissue {
        thickness_cm: f64,
        atten_db_per_cm: f64,
    },
}

impl Obstacle {
    pub fn pm0() -> Self {
        Obstacle::Tissue {
            thickness_cm: PM0_THICKNESS_CM,
            atten_db_per_cm: FAT_DB_PER_CM,
        }
    }

    pub fn pm1() -> Self {
        Obstacle::Tissue {
            thickness_cm: PM1_THICKNESS_CM,
            atten_db_per_cm: MUSCLE_DB_PER_CM,
        }
    }

    /// Total one-way attenuation in dB.
    pub fn attenuation_db(&self) -> f64 {
        match *self {
            Obstacle::None => 0.0,
            Obstacle::Tissue {
                thickness_cm,
                atten_db_per_cm,
            } => thickness_cm * atten_db_per_cm,
        }
    }
}

/// A narrowband interfering tone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interferer {
    pub freq_hz: f64,
    /// Tone power relative to the attenuated signal power.
    pub relative_power_db: f64,
}

/// Decoded form of a `SCEN-dist-obst` name, e.g. `SCEN-050-PM1`.
///
/// Obstacle codes: `OTA` (none), `PM0` / `PM1` (fat / muscle presets) and
/// `T<mm>A<tenths dB/cm>` for other tissue slabs, e.g. `T30A16`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioCode {
    pub distance_cm: u32,
    pub obstacle: Obstacle,
}

impl ScenarioCode {
    pub fn from_fields(distance_cm: f64, obstacle: Obstacle) -> Result<Self, SignalError> {
        if !(distance_cm > 0.0) || distance_cm.fract() != 0.0 || distance_cm > 999.0 {
            return Err(SignalError::InvalidScenario(format!(
                "distance {distance_cm} cm is not a whole number in 1..=999"
            )));
        }
        if let Obstacle::Tissue {
            thickness_cm,
            atten_db_per_cm,
        } = obstacle
        {
            if !(thickness_cm >= 0.0) || !(atten_db_per_cm >= 0.0) {
                return Err(SignalError::InvalidScenario(
                    "tissue thickness and attenuation must be non-negative".into(),
                ));
            }
        }
        Ok(Self {
            distance_cm: distance_cm as u32,
            obstacle,
        })
    }
}

fn tenths(x: f64) -> Option<u32> {
    let t = (x * 10.0).round();
    ((t / 10.0 - x).abs() < 1e-9 && t >= 0.0).then_some(t as u32)
}

impl fmt::Display for ScenarioCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SCEN-{:03}-", self.distance_cm)?;
        match self.obstacle {
            Obstacle::None => write!(f, "OTA"),
            o if o == Obstacle::pm0() => write!(f, "PM0"),
            o if o == Obstacle::pm1() => write!(f, "PM1"),
            Obstacle::Tissue {
                thickness_cm,
                atten_db_per_cm,
            } => {
                // thickness in mm equals tenths of a cm
                let mm = tenths(thickness_cm).ok_or(fmt::Error)?;
                let att = tenths(atten_db_per_cm).ok_or(fmt::Error)?;
                write!(f, "T{mm}A{att}")
            }
        }
    }
}

impl FromStr for ScenarioCode {
    type Err = SignalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SignalError::InvalidScenario(format!("'{s}' is not a SCEN-dist-obst name"));
        let mut parts = s.split('-');
        if parts.next() != Some("SCEN") {
            return Err(bad());
        }
        let dist = parts.next().ok_or_else(bad)?;
        let obst = parts.next().ok_or_else(bad)?;
        if parts.next().is_some() || dist.len() != 3 || !dist.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let distance_cm: u32 = dist.parse().map_err(|_| bad())?;
        if distance_cm == 0 {
            return Err(bad());
        }
        let obstacle = match obst {
            "OTA" => Obstacle::None,
            "PM0" => Obstacle::pm0(),
            "PM1" => Obstacle::pm1(),
            other => {
                let rest = other.strip_prefix('T').ok_or_else(bad)?;
                let (mm, att) = rest.split_once('A').ok_or_else(bad)?;
                let mm: u32 = mm.parse().map_err(|_| bad())?;
                let att: u32 = att.parse().map_err(|_| bad())?;
                Obstacle::Tissue {
                    thickness_cm: f64::from(mm) / 10.0,
                    atten_db_per_cm: f64::from(att) / 10.0,
                }
            }
        };
        Ok(Self {
            distance_cm,
            obstacle,
        })
    }
}

/// Conditions of one sub-dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelScenario {
    pub name: String,
    pub distance_cm: f64,
    pub obstacle: Obstacle,
    /// Target SNR; `inf` disables AWGN.
    pub snr_db: f64,
    #[serde(default)]
    pub interferers: Vec<Interferer>,
    pub seed: u64,
}

impl ChannelScenario {
    pub fn new(
        distance_cm: f64,
        obstacle: Obstacle,
        snr_db: f64,
        interferers: Vec<Interferer>,
        seed: u64,
    ) -> Result<Self, SignalError> {
        let code = ScenarioCode::from_fields(distance_cm, obstacle)?;
        let s = Self {
            name: code.to_string(),
            distance_cm,
            obstacle,
            snr_db,
            interferers,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    /// Reference channel: 20 cm, no obstacle, no interference, no noise.
    pub fn reference(seed: u64) -> Self {
        Self::new(REFERENCE_DISTANCE_CM, Obstacle::None, f64::INFINITY, Vec::new(), seed)
            .expect("reference scenario is valid")
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        let code = ScenarioCode::from_fields(self.distance_cm, self.obstacle)?;
        if code.to_string() != self.name {
            return Err(SignalError::InvalidScenario(format!(
                "name '{}' does not encode distance {} cm / obstacle {:?} (expected '{}')",
                self.name, self.distance_cm, self.obstacle, code
            )));
        }
        if self.snr_db.is_nan() {
            return Err(SignalError::InvalidScenario("snr_db is NaN".into()));
        }
        if self
            .interferers
            .iter()
            .any(|i| !i.freq_hz.is_finite() || !i.relative_power_db.is_finite())
        {
            return Err(SignalError::InvalidScenario("non-finite interferer".into()));
        }
        Ok(())
    }

    /// Linear amplitude factor of path loss plus obstacle.
    pub fn amplitude_gain(&self) -> f64 {
        (REFERENCE_DISTANCE_CM / self.distance_cm) * 10f64.powf(-self.obstacle.attenuation_db() / 20.0)
    }
}

/// EPC-Gen2 turnaround times for a link rate. They do not shape the RN16
/// window and are carried as metadata only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkTiming {
    /// Tag reply delay, `10 / R`.
    pub t1_s: f64,
    /// Reader reaction time, `1 / R`.
    pub t2_s: f64,
}

impl LinkTiming {
    pub fn for_rate(datarate_hz: f64) -> Self {
        Self {
            t1_s: 10.0 / datarate_hz,
            t2_s: 1.0 / datarate_hz,
        }
    }
}

/// A named list of scenarios, stored as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioCatalog {
    #[serde(rename = "scenario", default)]
    pub scenarios: Vec<ChannelScenario>,
}

impl ScenarioCatalog {
    pub fn get(&self, name: &str) -> Option<&ChannelScenario> {
        self.scenarios.iter().find(|s| s.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.scenarios.iter().map(|s| s.name.as_str()).collect()
    }

    pub fn from_toml_str(text: &str) -> Result<Self, SignalError> {
        let cat: Self = toml::from_str(text).map_err(|e| SignalError::Catalog(e.to_string()))?;
        if cat.scenarios.is_empty() {
            return Err(SignalError::Catalog("no [[scenario]] tables".into()));
        }
        for s in &cat.scenarios {
            s.validate()?;
        }
        let mut names = cat.names();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(SignalError::Catalog("duplicate scenario name".into()));
        }
        Ok(cat)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("catalog serializes")
    }

    pub fn load(path: &Path) -> Result<Self, SignalError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SignalError::Catalog(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Built-in catalogs: `desk` (three over-the-air analogs, moderate
    /// SNR), `desk-lowsnr` (same geometry, low SNR) and `tissue` (fat and
    /// muscle slabs at 20 and 50 cm).
    pub fn builtin(name: &str) -> Option<Self> {
        let ota = |d: f64, snr: f64, seed: u64, tones: Vec<Interferer>| {
            ChannelScenario::new(d, Obstacle::None, snr, tones, seed).expect("valid preset")
        };
        let tone = |freq_hz: f64, relative_power_db: f64| Interferer {
            freq_hz,
            relative_power_db,
        };
        let scenarios = match name {
            "desk" => vec![
                ota(20.0, 25.0, 1020, vec![tone(310e3, -20.0)]),
                ota(50.0, 20.0, 1050, vec![tone(-450e3, -18.0)]),
                ota(100.0, 15.0, 1100, vec![tone(720e3, -15.0)]),
            ],
            "desk-lowsnr" => vec![
                ota(20.0, 6.0, 2020, vec![tone(310e3, -20.0)]),
                ota(50.0, 4.0, 2050, vec![tone(-450e3, -18.0)]),
                ota(100.0, 2.0, 2100, vec![tone(720e3, -15.0)]),
            ],
            "tissue" => {
                let t = |d: f64, o: Obstacle, snr: f64, seed: u64| {
                    ChannelScenario::new(d, o, snr, vec![tone(310e3, -20.0)], seed).expect("valid preset")
                };
                vec![
                    t(20.0, Obstacle::pm0(), 22.0, 3020),
                    t(50.0, Obstacle::pm0(), 17.0, 3050),
                    t(20.0, Obstacle::pm1(), 18.0, 4020),
                    t(50.0, Obstacle::pm1(), 12.0, 4050),
                ]
            }
            _ => return None,
        };
        Some(Self { scenarios })
    }

    pub const BUILTIN_NAMES: [&'static str; 3] = ["desk", "desk-lowsnr", "tissue"];
}
