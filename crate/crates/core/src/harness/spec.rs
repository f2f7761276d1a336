use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::augment::DEFAULT_PHI;
use crate::fedavg::AggregationPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    /// Train and test on the first scenario only.
    #[serde(rename = "local")]
    Local,
    /// One model on the concatenation of every scenario.
    #[serde(rename = "union")]
    Union,
    /// Mean accuracy of every per-scenario model on every scenario.
    #[serde(rename = "baseline")]
    Baseline,
    /// Per-scenario models tested on every scenario's test split.
    #[serde(rename = "cross")]
    Cross,
    #[serde(rename = "federated")]
    Federated,
    #[serde(rename = "federated+da")]
    FederatedDa,
    #[serde(rename = "union+da")]
    UnionDa,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::Local,
        Mode::Union,
        Mode::Baseline,
        Mode::Cross,
        Mode::Federated,
        Mode::FederatedDa,
        Mode::UnionDa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Local => "local",
            Mode::Union => "union",
            Mode::Baseline => "baseline",
            Mode::Cross => "cross",
            Mode::Federated => "federated",
            Mode::FederatedDa => "federated+da",
            Mode::UnionDa => "union+da",
        }
    }

    pub fn augments(self) -> bool {
        matches!(self, Mode::FederatedDa | Mode::UnionDa)
    }

    pub fn is_federated(self) -> bool {
        matches!(self, Mode::Federated | Mode::FederatedDa)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode {s:?}"))
    }
}

/// Everything that determines one experiment's numbers.
///
/// Every field is always serialised, so a results directory records the
/// full provenance of what it reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub mode: Mode,
    /// A built-in catalog name or a path to a catalog file.
    pub catalog: String,
    /// Scenario names from the catalog; empty means all of them.
    pub scenarios: Vec<String>,
    /// Corpus directory written by `fedprint gen`; empty means synthesise.
    pub data_dir: String,
    pub tags: u32,
    pub comms_per_tag: usize,
    pub fraction: f64,
    pub window: usize,
    pub convs: usize,
    /// Upper bound on training epochs for centrally trained models.
    pub epochs: usize,
    /// Early-stopping patience in epochs; 0 disables it.
    pub patience: usize,
    pub rounds: u32,
    pub local_epochs: u32,
    pub bootstrap_epochs: u32,
    pub policy: AggregationPolicy,
    pub batch_size: usize,
    /// Perturbation coefficients for the augmented modes.
    pub augment_phi: Vec<f64>,
    /// Accuracy whose first crossing (epoch or round) is reported; 0 disables.
    pub target_accuracy: f64,
    /// Stop federated runs as soon as the union test accuracy reaches the target.
    pub stop_at_target: bool,
    pub population_seed: u64,
    pub split_seed: u64,
    pub model_seed: u64,
    pub augment_seed: u64,
}

/// Keys every spec file must contain.
pub const SPEC_FIELDS: [&str; 24] = [
    "name",
    "mode",
    "catalog",
    "scenarios",
    "data_dir",
    "tags",
    "comms_per_tag",
    "fraction",
    "window",
    "convs",
    "epochs",
    "patience",
    "rounds",
    "local_epochs",
    "bootstrap_epochs",
    "policy",
    "batch_size",
    "augment_phi",
    "target_accuracy",
    "stop_at_target",
    "population_seed",
    "split_seed",
    "model_seed",
    "augment_seed",
];

impl ExperimentSpec {
    /// Desk-scale defaults: 20 tags, 200 communications, three OTA scenarios.
    pub fn desk(name: &str, mode: Mode) -> Self {
        Self {
            name: name.to_string(),
            mode,
            catalog: "desk".into(),
            scenarios: Vec::new(),
            data_dir: String::new(),
            tags: 20,
            comms_per_tag: 200,
            fraction: 1.0,
            window: 1024,
            convs: 2,
            epochs: 30,
            patience: 5,
            rounds: 30,
            local_epochs: 1,
            bootstrap_epochs: 0,
            policy: AggregationPolicy::Uniform,
            batch_size: 64,
            augment_phi: DEFAULT_PHI.to_vec(),
            target_accuracy: 0.0,
            stop_at_target: false,
            population_seed: 1,
            split_seed: 2,
            model_seed: 3,
            augment_seed: 4,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |what: String| Err(HarnessError::InvalidSpec(format!("{}: {what}", self.name)));
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return bad(format!("name {:?} is not usable as a directory name", self.name));
        }
        if self.tags < 2 {
            return bad(format!("need at least 2 tags, got {}", self.tags));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return bad(format!("fraction {} is outside (0, 1]", self.fraction));
        }
        if self.batch_size == 0 || self.window == 0 {
            return bad("batch size and window must be positive".into());
        }
        if self.mode.augments() && self.augment_phi.iter().any(|p| !(*p >= 0.0)) {
            return bad("augmentation coefficients must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.target_accuracy) {
            return bad(format!("target accuracy {} is outside [0, 1]", self.target_accuracy));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::InvalidSpec(e.to_string()))
    }

    /// Parses a spec, refusing input that lacks any field.
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let table: toml::Table = toml::from_str(text).map_err(|e| HarnessError::InvalidSpec(e.to_string()))?;
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self, HarnessError> {
        let missing: Vec<&str> = SPEC_FIELDS.iter().copied().filter(|k| !table.contains_key(*k)).collect();
        if !missing.is_empty() {
            return Err(HarnessError::MissingFields(missing.join(", ")));
        }
        table.try_into().map_err(|e: toml::de::Error| HarnessError::InvalidSpec(e.to_string()))
    }
}

/// A suite file: `[defaults]` merged under each `[[experiment]]` table.
#[derive(Debug, Clone, PartialEq)]
pub struct Suite {
    pub experiments: Vec<ExperimentSpec>,
}

impl Suite {
    /// Fields missing from both an experiment and `[defaults]` fall back to
    /// the desk defaults.
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let root: toml::Table = toml::from_str(text).map_err(|e| HarnessError::InvalidSpec(e.to_string()))?;
        let defaults = match root.get("defaults") {
            Some(toml::Value::Table(t)) => t.clone(),
            Some(_) => return Err(HarnessError::InvalidSpec("[defaults] must be a table".into())),
            None => toml::Table::new(),
        };
        let list = match root.get("experiment") {
            Some(toml::Value::Array(a)) => a.clone(),
            Some(_) => return Err(HarnessError::InvalidSpec("experiment must be an array of tables".into())),
            None => Vec::new(),
        };
        let mut experiments = Vec::with_capacity(list.len());
        for (i, item) in list.into_iter().enumerate() {
            let toml::Value::Table(own) = item else {
                return Err(HarnessError::InvalidSpec(format!("experiment {i} is not a table")));
            };
            let mode = own
                .get("mode")
                .or_else(|| defaults.get("mode"))
                .and_then(|v| v.as_str())
                .ok_or_else(|| HarnessError::InvalidSpec(format!("experiment {i} has no mode")))?;
            let mode: Mode = mode.parse().map_err(HarnessError::InvalidSpec)?;
            let base = toml::Table::try_from(ExperimentSpec::desk(&format!("experiment-{i}"), mode))
                .map_err(|e| HarnessError::InvalidSpec(e.to_string()))?;
            let mut merged = base;
            merged.extend(defaults.clone());
            merged.extend(own);
            let spec = ExperimentSpec::from_table(merged)?;
            spec.validate()?;
            experiments.push(spec);
        }
        let mut names: Vec<&str> = experiments.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(HarnessError::InvalidSpec(format!("experiment name {:?} used twice", w[0])));
        }
        Ok(Self { experiments })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_round_trips_and_lists_every_field() {
        let spec = ExperimentSpec::desk("a", Mode::FederatedDa);
        let text = spec.to_toml().unwrap();
        let table: toml::Table = toml::from_str(&text).unwrap();
        assert_eq!(table.len(), SPEC_FIELDS.len());
        for k in SPEC_FIELDS {
            assert!(table.contains_key(k), "{k}");
        }
        assert_eq!(ExperimentSpec::from_toml(&text).unwrap(), spec);
    }

    #[test]
    fn missing_field_refused() {
        let text = ExperimentSpec::desk("a", Mode::Local).to_toml().unwrap();
        let cut: String = text.lines().filter(|l| !l.starts_with("split_seed")).map(|l| format!("{l}\n")).collect();
        assert!(matches!(
            ExperimentSpec::from_toml(&cut),
            Err(HarnessError::MissingFields(f)) if f == "split_seed"
        ));
    }

    #[test]
    fn suite_merges_defaults() {
        let text = r#"
            [defaults]
            tags = 5
            fraction = 0.1

            [[experiment]]
            name = "u"
            mode = "union"

            [[experiment]]
            name = "f"
            mode = "federated+da"
            rounds = 3
        "#;
        let suite = Suite::from_toml(text).unwrap();
        assert_eq!(suite.experiments.len(), 2);
        assert_eq!(suite.experiments[0].tags, 5);
        assert_eq!(suite.experiments[1].mode, Mode::FederatedDa);
        assert_eq!(suite.experiments[1].rounds, 3);
        assert_eq!(suite.experiments[1].fraction, 0.1);
    }

    #[test]
    fn suite_rejects_duplicates_and_bad_modes() {
        let dup = "[[experiment]]\nname = \"x\"\nmode = \"local\"\n[[experiment]]\nname = \"x\"\nmode = \"union\"\n";
        assert!(Suite::from_toml(dup).is_err());
        assert!(Suite::from_toml("[[experiment]]\nname = \"x\"\nmode = \"solo\"\n").is_err());
    }

    #[test]
    fn validation() {
        let mut s = ExperimentSpec::desk("a", Mode::Local);
        assert!(s.validate().is_ok());
        s.fraction = 0.0;
        assert!(s.validate().is_err());
        let mut s = ExperimentSpec::desk("../x", Mode::Local);
        assert!(s.validate().is_err());
        s.name = "ok".into();
        s.tags = 1;
        assert!(s.validate().is_err());
    }

    #[test]
    fn modes_parse() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
    }
}
