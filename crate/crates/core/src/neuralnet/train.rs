//! Mini-batch training, evaluation and best-validation model selection.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::adam::ModelState;
use super::model::Network;
use super::tensor::Tensor3;
use super::NnError;
use crate::datapipe::{CommKey, SliceExample};

const EVAL_BATCH: usize = 256;

/// Stacks slices into a `B × 2 × L` channels-first tensor.
pub fn make_batch(examples: &[&SliceExample], classes: usize) -> Result<(Tensor3<f32>, Vec<usize>), NnError> {
    let first = examples.first().ok_or(NnError::EmptyDataset)?;
    let len = first.window();
    let mut t = Tensor3::zeros(examples.len(), 2, len);
    let mut labels = Vec::with_capacity(examples.len());
    for (b, ex) in examples.iter().enumerate() {
        if ex.window() != len || ex.data.len() != 2 * len {
            return Err(NnError::ShapeMismatch(format!(
                "slice of length {} in a batch of length {len}",
                ex.window()
            )));
        }
        if !ex.is_finite() {
            return Err(NnError::NonFinite(format!("slice {} of comm {}", ex.slice_index, ex.comm_index)));
        }
        let label = ex.label as usize;
        if label >= classes {
            return Err(NnError::LabelOutOfRange { label, classes });
        }
        labels.push(label);
        let s = t.sample_mut(b);
        let (re, im) = s.split_at_mut(len);
        for (i, pair) in ex.data.chunks_exact(2).enumerate() {
            re[i] = pair[0];
            im[i] = pair[1];
        }
    }
    Ok((t, labels))
}

/// One shuffled pass over `data`. Returns the example-weighted mean loss.
pub fn train_epoch<R: Rng + ?Sized>(
    model: &mut ModelState<f32>,
    data: &[SliceExample],
    batch_size: usize,
    rng: &mut R,
) -> Result<f64, NnError> {
    if data.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let batch_size = batch_size.max(1);
    let classes = model.arch().num_classes;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0f64;
    for chunk in order.chunks(batch_size) {
        let refs: Vec<&SliceExample> = chunk.iter().map(|&i| &data[i]).collect();
        let (x, labels) = make_batch(&refs, classes)?;
        let loss = model.train_step(x, &labels)?;
        total += f64::from(loss) * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Rows are true labels, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.classes + predicted] += 1;
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        &self.counts[truth * self.classes..(truth + 1) * self.classes]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.correct() as f64 / n as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Per-slice accuracy.
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    /// Accuracy after a majority vote over the slices of each communication.
    pub vote_accuracy: f64,
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class and its score row for every slice, in input order.
fn score_all(net: &Network<f32>, data: &[SliceExample]) -> Result<Vec<(usize, Vec<f32>)>, NnError> {
    let classes = net.arch().num_classes;
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_BATCH) {
        let refs: Vec<&SliceExample> = chunk.iter().collect();
        let (x, _) = make_batch(&refs, classes)?;
        let scores = net.predict(&x)?;
        for row in scores.chunks_exact(classes) {
            out.push((argmax(row), row.to_vec()));
        }
    }
    Ok(out)
}

pub fn predict_labels(net: &Network<f32>, data: &[SliceExample]) -> Result<Vec<usize>, NnError> {
    Ok(score_all(net, data)?.into_iter().map(|(p, _)| p).collect())
}

/// Read-only and deterministic.
pub fn evaluate(net: &Network<f32>, data: &[SliceExample]) -> Result<EvalReport, NnError> {
    if data.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let classes = net.arch().num_classes;
    let scored = score_all(net, data)?;
    let mut confusion = ConfusionMatrix::new(classes);
    // votes per communication; ties go to the larger summed score
    let mut votes: BTreeMap<CommKey, (Vec<u32>, Vec<f64>)> = BTreeMap::new();
    for (ex, (pred, row)) in data.iter().zip(&scored) {
        confusion.record(ex.label as usize, *pred);
        let entry = votes
            .entry(ex.comm_key())
            .or_insert_with(|| (vec![0; classes], vec![0.0; classes]));
        entry.0[*pred] += 1;
        for (acc, &s) in entry.1.iter_mut().zip(row) {
            *acc += f64::from(s);
        }
    }
    let mut vote_correct = 0usize;
    for (key, (counts, sums)) in &votes {
        let winner = (0..classes)
            .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(sums[a].total_cmp(&sums[b])).then(b.cmp(&a)))
            .expect("at least two classes");
        if winner == key.tag_id as usize {
            vote_correct += 1;
        }
    }
    Ok(EvalReport {
        accuracy: confusion.accuracy(),
        confusion,
        vote_accuracy: vote_correct as f64 / votes.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    /// Stop as soon as validation accuracy reaches this value.
    pub target_accuracy: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            batch_size: 64,
            patience: Some(10),
            target_accuracy: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    /// Only recorded when a monitor set is passed to [`fit`].
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Weights from the epoch with the best validation accuracy.
    pub best: Network<f32>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub curve: Vec<EpochRecord>,
}

/// Trains `model` in place and keeps the best-validation weights.
///
/// `monitor`, when given, is evaluated every epoch for the record only; it
/// never influences model selection.
pub fn fit<R: Rng + ?Sized>(
    model: &mut ModelState<f32>,
    train: &[SliceExample],
    validation: &[SliceExample],
    monitor: Option<&[SliceExample]>,
    cfg: &FitConfig,
    rng: &mut R,
) -> Result<FitResult, NnError> {
    if validation.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let mut best = model.network.clone();
    let mut best_val = evaluate(&best, validation)?.accuracy;
    let mut best_epoch = 0;
    let mut curve = Vec::with_capacity(cfg.max_epochs);
    for epoch in 1..=cfg.max_epochs {
        let train_loss = train_epoch(model, train, cfg.batch_size, rng)?;
        let val_accuracy = evaluate(&model.network, validation)?.accuracy;
        let test_accuracy = match monitor {
            Some(m) => Some(evaluate(&model.network, m)?.accuracy),
            None => None,
        };
        log::debug!("epoch {epoch}: loss {train_loss:.4}, validation accuracy {val_accuracy:.4}");
        curve.push(EpochRecord {
            epoch,
            train_loss,
            val_accuracy,
            test_accuracy,
        });
        if val_accuracy > best_val {
            best_val = val_accuracy;
            best_epoch = epoch;
            best = model.network.clone();
        }
        if cfg.target_accuracy.is_some_and(|t| best_val >= t) {
            break;
        }
        if cfg.patience.is_some_and(|p| epoch - best_epoch >= p) {
            break;
        }
    }
    Ok(FitResult {
        best,
        best_epoch,
        best_val_accuracy: best_val,
        curve,
    })
}
