use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use super::record::{CrossMatrix, CurvePoint, ResultsRecord};
use super::spec::{ExperimentSpec, Mode};
use super::HarnessError;
use crate::augment::{augment_slices, AugmentConfig};
use crate::datapipe::{read_corpus, split_corpus, CommKey, SliceExample, SplitConfig, SplitDataset};
use crate::fedavg::{FedConfig, Federation, ReaderClient};
use crate::neuralnet::{evaluate, fit, ArchConfig, ConfusionMatrix, FitConfig, ModelState, Network};
use crate::rng::{label_of, purpose, substream};
use crate::signalgen::{generate_population, synthesize_scenario, IQWaveform, ImpairmentRanges, ScenarioCatalog, SynthConfig};

/// One scenario's split slices.
#[derive(Debug, Clone)]
pub struct ScenarioData {
    pub name: String,
    pub data: SplitDataset,
}

pub fn load_catalog(name_or_path: &str) -> Result<ScenarioCatalog, HarnessError> {
    if let Some(cat) = ScenarioCatalog::builtin(name_or_path) {
        return Ok(cat);
    }
    Ok(ScenarioCatalog::load(Path::new(name_or_path))?)
}

pub fn arch_for(spec: &ExperimentSpec) -> Result<ArchConfig, HarnessError> {
    let arch = ArchConfig::new(spec.window, spec.tags as usize).with_blocks(spec.convs);
    arch.validate()?;
    Ok(arch)
}

/// Fails if any communication contributes slices to more than one partition.
pub fn check_no_leakage(data: &SplitDataset) -> Result<(), HarnessError> {
    let keys = |xs: &[SliceExample]| xs.iter().map(SliceExample::comm_key).collect::<BTreeSet<CommKey>>();
    let train = keys(&data.train);
    let val = keys(&data.validation);
    let test = keys(&data.test);
    if train.intersection(&val).next().is_some()
        || train.intersection(&test).next().is_some()
        || val.intersection(&test).next().is_some()
    {
        return Err(HarnessError::Leakage);
    }
    Ok(())
}

fn split(waves: &[IQWaveform], spec: &ExperimentSpec) -> Result<SplitDataset, HarnessError> {
    let data = split_corpus(waves, &SplitConfig::new(spec.window, spec.fraction, spec.split_seed))?;
    check_no_leakage(&data)?;
    Ok(data)
}

/// Synthesises (or loads) and splits every scenario an experiment names.
pub fn build_datasets(spec: &ExperimentSpec) -> Result<Vec<ScenarioData>, HarnessError> {
    if !spec.data_dir.is_empty() {
        let (manifest, waves) = read_corpus(Path::new(&spec.data_dir))?;
        if manifest.num_classes != spec.tags {
            return Err(HarnessError::InvalidSpec(format!(
                "corpus in {} has {} classes, spec asks for {} tags",
                spec.data_dir, manifest.num_classes, spec.tags
            )));
        }
        let mut by_scenario: BTreeMap<String, Vec<IQWaveform>> = BTreeMap::new();
        let mut order = Vec::new();
        for w in waves {
            if !by_scenario.contains_key(&w.scenario_name) {
                order.push(w.scenario_name.clone());
            }
            by_scenario.entry(w.scenario_name.clone()).or_default().push(w);
        }
        let names = if spec.scenarios.is_empty() { order } else { spec.scenarios.clone() };
        return names
            .into_iter()
            .map(|name| {
                let waves = by_scenario
                    .get(&name)
                    .ok_or_else(|| HarnessError::InvalidSpec(format!("scenario {name} not in {}", spec.data_dir)))?;
                Ok(ScenarioData {
                    data: split(waves, spec)?,
                    name,
                })
            })
            .collect();
    }

    let catalog = load_catalog(&spec.catalog)?;
    let scenarios = if spec.scenarios.is_empty() {
        catalog.scenarios.clone()
    } else {
        spec.scenarios
            .iter()
            .map(|n| {
                catalog
                    .get(n)
                    .cloned()
                    .ok_or_else(|| HarnessError::InvalidSpec(format!("scenario {n} not in catalog {}", spec.catalog)))
            })
            .collect::<Result<_, _>>()?
    };
    let profiles = generate_population(spec.tags, spec.population_seed, &ImpairmentRanges::default());
    scenarios
        .iter()
        .map(|s| {
            let waves = synthesize_scenario(&profiles, s, spec.comms_per_tag, &SynthConfig::default())?;
            Ok(ScenarioData {
                name: s.name.clone(),
                data: split(&waves, spec)?,
            })
        })
        .collect()
}

fn augment_for(spec: &ExperimentSpec, scope: &str) -> AugmentConfig {
    AugmentConfig {
        phi: spec.augment_phi.clone(),
        seed: crate::rng::derive_seed(spec.augment_seed, &[label_of(scope)]),
    }
}

/// A centrally trained model and its history.
#[derive(Debug, Clone)]
pub struct Trained {
    pub network: Network<f32>,
    pub curve: Vec<CurvePoint>,
    pub best_epoch: usize,
    pub train_examples: usize,
    pub train_seconds: f64,
}

/// Trains one model with best-validation selection; `scope` keys the
/// shuffling stream so distinct models in one experiment stay independent.
pub fn train_central(
    spec: &ExperimentSpec,
    train: &[SliceExample],
    validation: &[SliceExample],
    monitor: Option<&[SliceExample]>,
    scope: &str,
) -> Result<Trained, HarnessError> {
    let started = std::time::Instant::now();
    let arch = arch_for(spec)?;
    let mut model = ModelState::new(&arch, spec.model_seed)?;
    let mut rng = substream(spec.model_seed, &[purpose::SHUFFLE, label_of(scope)]);
    let cfg = FitConfig {
        max_epochs: spec.epochs,
        batch_size: spec.batch_size,
        patience: (spec.patience > 0).then_some(spec.patience),
        target_accuracy: None,
    };
    let res = fit(&mut model, train, validation, monitor, &cfg, &mut rng)?;
    log::info!(
        "{}/{scope}: best validation accuracy {:.4} at epoch {}",
        spec.name,
        res.best_val_accuracy,
        res.best_epoch
    );
    Ok(Trained {
        network: res.best,
        curve: res
            .curve
            .iter()
            .map(|r| CurvePoint {
                step: r.epoch,
                train_loss: r.train_loss,
                val_accuracy: r.val_accuracy,
                test_accuracy: r.test_accuracy.unwrap_or(f64::NAN),
            })
            .collect(),
        best_epoch: res.best_epoch,
        train_examples: train.len(),
        train_seconds: started.elapsed().as_secs_f64(),
    })
}

fn first_crossing(curve: &[CurvePoint], target: f64) -> Option<usize> {
    if target <= 0.0 {
        return None;
    }
    curve.iter().find(|p| p.test_accuracy >= target).map(|p| p.step)
}

fn record_from(
    spec: &ExperimentSpec,
    trained: &Trained,
    test: &[SliceExample],
) -> Result<ResultsRecord, HarnessError> {
    let report = evaluate(&trained.network, test)?;
    Ok(ResultsRecord {
        spec: spec.clone(),
        test_accuracy: report.confusion.accuracy(),
        vote_accuracy: report.vote_accuracy,
        best_step: trained.best_epoch,
        steps_to_target: first_crossing(&trained.curve, spec.target_accuracy),
        train_examples: trained.train_examples,
        test_examples: test.len(),
        confusion: report.confusion,
        curve: trained.curve.clone(),
        cross: None,
        bytes_per_round: None,
        wall_clock_s: 0.0,
        network: Some(trained.network.clone()),
    })
}

/// Same-channel training on the first scenario.
pub fn run_local(spec: &ExperimentSpec, sets: &[ScenarioData]) -> Result<ResultsRecord, HarnessError> {
    let s = sets.first().ok_or_else(|| HarnessError::InvalidSpec("no scenarios".into()))?;
    let trained = train_central(spec, &s.data.train, &s.data.validation, Some(&s.data.test), &s.name)?;
    record_from(spec, &trained, &s.data.test)
}

/// One model on the concatenated splits, optionally with augmented training data.
pub fn compute_union(spec: &ExperimentSpec, sets: &[ScenarioData]) -> Result<ResultsRecord, HarnessError> {
    let all = SplitDataset::concat(sets.iter().map(|s| &s.data));
    let train = if spec.mode.augments() {
        augment_slices(&all.train, &augment_for(spec, "union"))?
    } else {
        all.train
    };
    // a one-scenario union is that scenario's local model
    let scope = match sets {
        [only] => only.name.as_str(),
        _ => "union",
    };
    let trained = train_central(spec, &train, &all.validation, Some(&all.test), scope)?;
    record_from(spec, &trained, &all.test)
}

/// Per-scenario models and their accuracy on every scenario's test split.
pub fn run_cross_matrix(spec: &ExperimentSpec, sets: &[ScenarioData]) -> Result<(CrossMatrix, Vec<Trained>), HarnessError> {
    if sets.is_empty() {
        return Err(HarnessError::InvalidSpec("no scenarios".into()));
    }
    let mut models = Vec::with_capacity(sets.len());
    for s in sets {
        models.push(train_central(spec, &s.data.train, &s.data.validation, Some(&s.data.test), &s.name)?);
    }
    let classes = spec.tags as usize;
    let mut accuracy = Vec::with_capacity(sets.len());
    let mut confusions = Vec::with_capacity(sets.len());
    for m in &models {
        let mut row = Vec::with_capacity(sets.len());
        let mut crow = Vec::with_capacity(sets.len());
        for s in sets {
            let r = evaluate(&m.network, &s.data.test)?;
            row.push(r.confusion.accuracy());
            crow.push(r.confusion);
        }
        accuracy.push(row);
        confusions.push(crow);
    }
    debug_assert!(confusions.iter().flatten().all(|c| c.classes == classes));
    Ok((
        CrossMatrix {
            scenarios: sets.iter().map(|s| s.name.clone()).collect(),
            accuracy,
            confusions,
        },
        models,
    ))
}

fn summed(confusions: impl IntoIterator<Item = ConfusionMatrix>, classes: usize) -> ConfusionMatrix {
    let mut total = ConfusionMatrix::new(classes);
    for c in confusions {
        for (a, b) in total.counts.iter_mut().zip(&c.counts) {
            *a += b;
        }
    }
    total
}

fn cross_record(
    spec: &ExperimentSpec,
    cross: CrossMatrix,
    models: &[Trained],
    sets: &[ScenarioData],
    diagonal_only: bool,
) -> ResultsRecord {
    let n = cross.scenarios.len();
    let classes = spec.tags as usize;
    let confusion = if diagonal_only {
        summed((0..n).map(|i| cross.confusions[i][i].clone()), classes)
    } else {
        summed(cross.confusions.iter().flatten().cloned(), classes)
    };
    // curve of the first model; the others are in the cross matrix
    let first = &models[0];
    ResultsRecord {
        spec: spec.clone(),
        test_accuracy: confusion.accuracy(),
        vote_accuracy: f64::NAN,
        best_step: first.best_epoch,
        steps_to_target: None,
        train_examples: models.iter().map(|m| m.train_examples).sum(),
        test_examples: if diagonal_only {
            sets.iter().map(|s| s.data.test.len()).sum()
        } else {
            n * sets.iter().map(|s| s.data.test.len()).sum::<usize>()
        },
        confusion,
        curve: first.curve.clone(),
        cross: Some(cross),
        bytes_per_round: None,
        wall_clock_s: 0.0,
        network: None,
    }
}

/// Mean accuracy over every (model, dataset) pair.
pub fn compute_baseline(spec: &ExperimentSpec, sets: &[ScenarioData]) -> Result<ResultsRecord, HarnessError> {
    let (cross, models) = run_cross_matrix(spec, sets)?;
    Ok(cross_record(spec, cross, &models, sets, false))
}

/// Federated training with one reader per scenario.
pub fn run_federated(spec: &ExperimentSpec, sets: &[ScenarioData]) -> Result<ResultsRecord, HarnessError> {
    let arch = arch_for(spec)?;
    let readers = sets
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let aug = spec.mode.augments().then(|| augment_for(spec, "federated"));
            let mut r = ReaderClient::new(i as u32, s.data.clone(), &arch, aug.as_ref(), spec.model_seed)?;
            r.batch_size = spec.batch_size;
            Ok(r)
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let train_examples = readers.iter().map(|r| r.train.len()).sum();
    let cfg = FedConfig {
        local_epochs: spec.local_epochs,
        bootstrap_epochs: spec.bootstrap_epochs,
        policy: spec.policy,
        model_seed: spec.model_seed,
        shared_warm_start: None,
    };
    let mut fed = Federation::start(readers, cfg)?;
    let all = SplitDataset::concat(sets.iter().map(|s| &s.data));
    let mut best = fed.global().clone();
    let mut best_val = evaluate(&best, &all.validation)?.accuracy;
    let mut best_step = 0;
    let mut curve = Vec::with_capacity(spec.rounds as usize);
    let mut bytes = None;
    for _ in 0..spec.rounds {
        let m = fed.run_round(true)?;
        let val = m.union_validation_accuracy.unwrap_or(f64::NAN);
        let test = m.union_test_accuracy.unwrap_or(f64::NAN);
        log::info!("{}: round {} union test accuracy {test:.4}", spec.name, m.round);
        curve.push(CurvePoint {
            step: m.round as usize,
            train_loss: m.train_loss.iter().sum::<f64>() / m.train_loss.len() as f64,
            val_accuracy: val,
            test_accuracy: test,
        });
        bytes = Some(m.traffic.upload_bytes + m.traffic.download_bytes);
        if val > best_val {
            best_val = val;
            best_step = m.round as usize;
            best = fed.global().clone();
        }
        if spec.stop_at_target && spec.target_accuracy > 0.0 && test >= spec.target_accuracy {
            break;
        }
    }
    let report = evaluate(&best, &all.test)?;
    Ok(ResultsRecord {
        spec: spec.clone(),
        test_accuracy: report.confusion.accuracy(),
        vote_accuracy: report.vote_accuracy,
        best_step,
        steps_to_target: first_crossing(&curve, spec.target_accuracy),
        train_examples,
        test_examples: all.test.len(),
        confusion: report.confusion,
        curve,
        cross: None,
        bytes_per_round: bytes,
        wall_clock_s: 0.0,
        network: Some(best),
    })
}

/// Builds the data and runs `spec` according to its mode.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ResultsRecord, HarnessError> {
    spec.validate()?;
    let started = std::time::Instant::now();
    let sets = build_datasets(spec)?;
    let mut record = run_on(spec, &sets)?;
    record.wall_clock_s = started.elapsed().as_secs_f64();
    Ok(record)
}

/// Runs `spec` on already built datasets.
pub fn run_on(spec: &ExperimentSpec, sets: &[ScenarioData]) -> Result<ResultsRecord, HarnessError> {
    match spec.mode {
        Mode::Local => run_local(spec, sets),
        Mode::Union | Mode::UnionDa => compute_union(spec, sets),
        Mode::Baseline => compute_baseline(spec, sets),
        Mode::Cross => {
            let (cross, models) = run_cross_matrix(spec, sets)?;
            Ok(cross_record(spec, cross, &models, sets, true))
        }
        Mode::Federated | Mode::FederatedDa => run_federated(spec, sets),
    }
}
