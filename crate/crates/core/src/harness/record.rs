//! Results directories: one per experiment, plus the suite report.
//!
//! ```text
//! <name>/spec.toml       the experiment, every field
//! <name>/summary.toml    final numbers
//! <name>/curves.csv      step, train_loss, val_accuracy, test_accuracy
//! <name>/confusion.csv   rows = true tag, columns = predicted tag
//! <name>/cross.csv       model × dataset accuracy (cross and baseline only)
//! <name>/model.fpwt     checkpoint of the evaluated model, when there is one
//! <name>/timing.toml     wall-clock seconds (the only nondeterministic file)
//! <name>/error.txt       instead of the above when the experiment failed
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::run::run_experiment;
use super::spec::{ExperimentSpec, Mode, Suite};
use super::HarnessError;
use crate::neuralnet::{encode_checkpoint, ConfusionMatrix, Network};

pub const SPEC_FILE: &str = "spec.toml";
pub const SUMMARY_FILE: &str = "summary.toml";
pub const CURVES_FILE: &str = "curves.csv";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const CROSS_FILE: &str = "cross.csv";
pub const TIMING_FILE: &str = "timing.toml";
pub const MODEL_FILE: &str = "model.fpwt";
pub const ERROR_FILE: &str = "error.txt";
pub const REPORT_FILE: &str = "report.md";

/// One epoch (central training) or round (federated training).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

/// Accuracy of the model trained on scenario `i` against scenario `j`'s test split.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossMatrix {
    pub scenarios: Vec<String>,
    pub accuracy: Vec<Vec<f64>>,
    pub confusions: Vec<Vec<ConfusionMatrix>>,
}

impl CrossMatrix {
    pub fn diagonal_mean(&self) -> f64 {
        let n = self.accuracy.len();
        (0..n).map(|i| self.accuracy[i][i]).sum::<f64>() / n as f64
    }

    /// NaN for a 1 × 1 matrix.
    pub fn off_diagonal_mean(&self) -> f64 {
        let n = self.accuracy.len();
        let mut sum = 0.0;
        for (i, row) in self.accuracy.iter().enumerate() {
            for (j, a) in row.iter().enumerate() {
                if i != j {
                    sum += a;
                }
            }
        }
        sum / (n * n - n) as f64
    }

    pub fn mean(&self) -> f64 {
        let n = self.accuracy.len();
        self.accuracy.iter().flatten().sum::<f64>() / (n * n) as f64
    }
}

#[derive(Debug, Clone)]
pub struct ResultsRecord {
    pub spec: ExperimentSpec,
    /// Slice-level accuracy, equal to trace / total of `confusion`.
    pub test_accuracy: f64,
    /// Per-communication majority vote; NaN where not defined.
    pub vote_accuracy: f64,
    /// Epoch or round whose weights were kept.
    pub best_step: usize,
    pub steps_to_target: Option<usize>,
    pub train_examples: usize,
    pub test_examples: usize,
    pub confusion: ConfusionMatrix,
    pub curve: Vec<CurvePoint>,
    pub cross: Option<CrossMatrix>,
    /// Weight bytes moved per federated round, both directions.
    pub bytes_per_round: Option<u64>,
    pub wall_clock_s: f64,
    /// The evaluated model, when the mode produces a single one.
    pub network: Option<Network<f32>>,
}

/// The deterministic scalar results of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub mode: Mode,
    pub test_accuracy: f64,
    pub vote_accuracy: f64,
    pub best_step: usize,
    pub steps_to_target: Option<usize>,
    pub train_examples: usize,
    pub test_examples: usize,
    pub bytes_per_round: Option<u64>,
    pub cross_diagonal_mean: Option<f64>,
    pub cross_off_diagonal_mean: Option<f64>,
}

impl ResultsRecord {
    pub fn summary(&self) -> Summary {
        Summary {
            name: self.spec.name.clone(),
            mode: self.spec.mode,
            test_accuracy: self.test_accuracy,
            vote_accuracy: self.vote_accuracy,
            best_step: self.best_step,
            steps_to_target: self.steps_to_target,
            train_examples: self.train_examples,
            test_examples: self.test_examples,
            bytes_per_round: self.bytes_per_round,
            cross_diagonal_mean: self.cross.as_ref().map(CrossMatrix::diagonal_mean),
            cross_off_diagonal_mean: self
                .cross
                .as_ref()
                .filter(|c| c.scenarios.len() > 1)
                .map(CrossMatrix::off_diagonal_mean),
        }
    }

    /// Checks the invariants every record must satisfy before it is written.
    pub fn check(&self) -> Result<(), HarnessError> {
        let bad = |what: String| Err(HarnessError::InvalidRecord(format!("{}: {what}", self.spec.name)));
        if !(0.0..=1.0).contains(&self.test_accuracy) {
            return bad(format!("accuracy {} outside [0, 1]", self.test_accuracy));
        }
        if (self.confusion.accuracy() - self.test_accuracy).abs() > 1e-12 {
            return bad("confusion matrix disagrees with the reported accuracy".into());
        }
        if self.confusion.total() != self.test_examples as u64 {
            return bad(format!(
                "confusion matrix counts {} examples, record says {}",
                self.confusion.total(),
                self.test_examples
            ));
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<(), HarnessError> {
        self.check()?;
        fs::create_dir_all(dir).map_err(io(dir))?;
        write_file(&dir.join(SPEC_FILE), &self.spec.to_toml()?)?;
        let summary = toml::to_string(&self.summary()).map_err(|e| HarnessError::InvalidRecord(e.to_string()))?;
        write_file(&dir.join(SUMMARY_FILE), &summary)?;

        let mut curves = String::from("step,train_loss,val_accuracy,test_accuracy\n");
        for p in &self.curve {
            let _ = writeln!(curves, "{},{},{},{}", p.step, p.train_loss, p.val_accuracy, p.test_accuracy);
        }
        write_file(&dir.join(CURVES_FILE), &curves)?;
        write_file(&dir.join(CONFUSION_FILE), &confusion_csv(&self.confusion))?;
        if let Some(cross) = &self.cross {
            let mut text = String::from("model\\data");
            for s in &cross.scenarios {
                let _ = write!(text, ",{s}");
            }
            text.push('\n');
            for (s, row) in cross.scenarios.iter().zip(&cross.accuracy) {
                text.push_str(s);
                for a in row {
                    let _ = write!(text, ",{a}");
                }
                text.push('\n');
            }
            write_file(&dir.join(CROSS_FILE), &text)?;
        }
        if let Some(net) = &self.network {
            let path = dir.join(MODEL_FILE);
            fs::write(&path, encode_checkpoint(net)).map_err(io(&path))?;
        }
        write_file(&dir.join(TIMING_FILE), &format!("wall_clock_s = {}\n", self.wall_clock_s))?;
        Ok(())
    }
}

pub fn confusion_csv(c: &ConfusionMatrix) -> String {
    let mut text = String::from("true\\predicted");
    for p in 0..c.classes {
        let _ = write!(text, ",{p}");
    }
    text.push('\n');
    for t in 0..c.classes {
        let _ = write!(text, "{t}");
        for v in c.row(t) {
            let _ = write!(text, ",{v}");
        }
        text.push('\n');
    }
    text
}

fn parse_confusion_csv(text: &str) -> Option<ConfusionMatrix> {
    let mut rows = text.lines().skip(1);
    let first: Vec<u64> = rows.next()?.split(',').skip(1).map(|v| v.parse().ok()).collect::<Option<_>>()?;
    let classes = first.len();
    let mut c = ConfusionMatrix::new(classes);
    c.counts[..classes].copy_from_slice(&first);
    for t in 1..classes {
        let row: Vec<u64> = rows.next()?.split(',').skip(1).map(|v| v.parse().ok()).collect::<Option<_>>()?;
        if row.len() != classes {
            return None;
        }
        c.counts[t * classes..(t + 1) * classes].copy_from_slice(&row);
    }
    Some(c)
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), HarnessError> {
    fs::write(path, text).map_err(io(path))
}

fn read_file(path: &Path) -> Result<String, HarnessError> {
    fs::read_to_string(path).map_err(io(path))
}

/// What a suite run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOutcome {
    pub succeeded: Vec<String>,
    pub failed: Vec<(String, String)>,
}

/// Runs every experiment into `out/<name>`; one failure does not stop the rest.
pub fn run_suite(suite: &Suite, out: &Path) -> Result<SuiteOutcome, HarnessError> {
    fs::create_dir_all(out).map_err(io(out))?;
    let mut outcome = SuiteOutcome {
        succeeded: Vec::new(),
        failed: Vec::new(),
    };
    for spec in &suite.experiments {
        let dir = out.join(&spec.name);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(io(&dir))?;
        }
        let result = run_experiment(spec).and_then(|r| r.write(&dir));
        match result {
            Ok(()) => {
                log::info!("{}: done", spec.name);
                outcome.succeeded.push(spec.name.clone());
            }
            Err(e) => {
                log::error!("{}: {e}", spec.name);
                fs::create_dir_all(&dir).map_err(io(&dir))?;
                write_file(&dir.join(SPEC_FILE), &spec.to_toml()?)?;
                write_file(&dir.join(ERROR_FILE), &format!("{e}\n"))?;
                outcome.failed.push((spec.name.clone(), e.to_string()));
            }
        }
    }
    Ok(outcome)
}

/// A results directory read back for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedResult {
    pub dir: PathBuf,
    pub spec: ExperimentSpec,
    pub summary: Option<Summary>,
    pub error: Option<String>,
}

/// Reads one experiment directory, refusing incomplete or inconsistent records.
pub fn load_result(dir: &Path) -> Result<LoadedResult, HarnessError> {
    let spec = ExperimentSpec::from_toml(&read_file(&dir.join(SPEC_FILE))?).map_err(|e| match e {
        HarnessError::MissingFields(f) => HarnessError::MissingFields(format!("{f} in {}", dir.display())),
        e => e,
    })?;
    let error_path = dir.join(ERROR_FILE);
    if error_path.exists() {
        return Ok(LoadedResult {
            dir: dir.to_path_buf(),
            spec,
            summary: None,
            error: Some(read_file(&error_path)?.trim().to_string()),
        });
    }
    let summary: Summary = toml::from_str(&read_file(&dir.join(SUMMARY_FILE))?)
        .map_err(|e| HarnessError::InvalidRecord(format!("{}: {e}", dir.display())))?;
    let confusion = parse_confusion_csv(&read_file(&dir.join(CONFUSION_FILE))?)
        .ok_or_else(|| HarnessError::InvalidRecord(format!("{}: unreadable confusion matrix", dir.display())))?;
    if (confusion.accuracy() - summary.test_accuracy).abs() > 1e-12 {
        return Err(HarnessError::InvalidRecord(format!(
            "{}: confusion matrix disagrees with the reported accuracy",
            dir.display()
        )));
    }
    Ok(LoadedResult {
        dir: dir.to_path_buf(),
        spec,
        summary: Some(summary),
        error: None,
    })
}

fn fmt_acc(v: Option<f64>) -> String {
    match v {
        Some(a) if a.is_finite() => format!("{a:.4}"),
        _ => "-".into(),
    }
}

/// Builds `report.md` for a results directory and returns its text.
///
/// Experiments are grouped by tag count, data fraction, window and depth,
/// with one column per mode.
pub fn emit_report(results: &Path) -> Result<String, HarnessError> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(results)
        .map_err(io(results))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(SPEC_FILE).exists())
        .collect();
    dirs.sort();
    let loaded = dirs.iter().map(|d| load_result(d)).collect::<Result<Vec<_>, _>>()?;

    type GroupKey = (u32, String, usize, usize);
    let mut groups: BTreeMap<GroupKey, BTreeMap<Mode, Vec<f64>>> = BTreeMap::new();
    for r in &loaded {
        if let Some(s) = &r.summary {
            let key = (r.spec.tags, format!("{}", r.spec.fraction), r.spec.window, r.spec.convs);
            groups.entry(key).or_default().entry(s.mode).or_default().push(s.test_accuracy);
        }
    }
    let columns = [
        Mode::Local,
        Mode::Cross,
        Mode::Baseline,
        Mode::Union,
        Mode::UnionDa,
        Mode::Federated,
        Mode::FederatedDa,
    ];
    let mut out = String::from("# Results\n\n## Accuracy by configuration\n\n| tags | fraction | window | convs |");
    for m in columns {
        let _ = write!(out, " {m} |");
    }
    out.push_str("\n|---|---|---|---|");
    for _ in columns {
        out.push_str("---|");
    }
    out.push('\n');
    for ((tags, fraction, window, convs), modes) in &groups {
        let _ = write!(out, "| {tags} | {fraction} | {window} | {convs} |");
        for m in columns {
            let v = modes.get(&m).map(|xs| xs.iter().sum::<f64>() / xs.len() as f64);
            let _ = write!(out, " {} |", fmt_acc(v));
        }
        out.push('\n');
    }
    out.push_str("\n## Experiments\n\n| name | mode | test accuracy | vote accuracy | best step | steps to target | cross diagonal | cross off-diagonal |\n|---|---|---|---|---|---|---|---|\n");
    for r in &loaded {
        match (&r.summary, &r.error) {
            (Some(s), _) => {
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} | {} | {} | {} | {} |",
                    s.name,
                    s.mode,
                    fmt_acc(Some(s.test_accuracy)),
                    fmt_acc(Some(s.vote_accuracy)),
                    s.best_step,
                    s.steps_to_target.map_or("-".into(), |v| v.to_string()),
                    fmt_acc(s.cross_diagonal_mean),
                    fmt_acc(s.cross_off_diagonal_mean),
                );
            }
            (None, Some(e)) => {
                let _ = writeln!(out, "| {} | {} | failed: {e} | | | | | |", r.spec.name, r.spec.mode);
            }
            (None, None) => {}
        }
    }
    write_file(&results.join(REPORT_FILE), &out)?;
    Ok(out)
}
