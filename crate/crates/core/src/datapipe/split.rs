//! Communication-level, per-tag stratified splits.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::slice::{slice_waveform_with, SliceExample, SliceOptions};
use super::DataError;
use crate::rng::{purpose, substream};
use crate::signalgen::IQWaveform;

/// Minimum communications per tag before a split is attempted.
pub const MIN_COMMS_PER_TAG: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// Train / validation / test proportions.
    pub ratios: [f64; 3],
    /// Share of each tag's communications kept before partitioning.
    pub fraction: f64,
    pub seed: u64,
    pub window: usize,
    #[serde(default)]
    pub standardize: bool,
}

impl SplitConfig {
    pub fn new(window: usize, fraction: f64, seed: u64) -> Self {
        Self {
            ratios: [0.8, 0.1, 0.1],
            fraction,
            seed,
            window,
            standardize: false,
        }
    }
}

/// Indices into the waveform list, per partition.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CommSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitDataset {
    pub train: Vec<SliceExample>,
    pub validation: Vec<SliceExample>,
    pub test: Vec<SliceExample>,
    pub fraction_used: f64,
}

impl SplitDataset {
    /// Concatenates several splits (e.g. one per scenario) partition-wise.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a SplitDataset>) -> SplitDataset {
        let mut out = SplitDataset::default();
        for p in parts {
            out.train.extend_from_slice(&p.train);
            out.validation.extend_from_slice(&p.validation);
            out.test.extend_from_slice(&p.test);
            out.fraction_used = p.fraction_used;
        }
        out
    }
}

/// Partition sizes `(train, validation, test)` for `k` kept communications.
pub fn partition_sizes(k: usize, ratios: [f64; 3]) -> (usize, usize, usize) {
    let total: f64 = ratios.iter().sum();
    let train = ((ratios[0] / total) * k as f64).round() as usize;
    let val = ((ratios[1] / total) * k as f64).round() as usize;
    let train = train.min(k);
    let val = val.min(k - train);
    (train, val, k - train - val)
}

/// Assigns communications to partitions, per tag, deterministically in
/// `cfg.seed`.
pub fn split_indices(waves: &[IQWaveform], cfg: &SplitConfig) -> Result<CommSplit, DataError> {
    if !(cfg.fraction > 0.0 && cfg.fraction <= 1.0) {
        return Err(DataError::InvalidFraction(cfg.fraction));
    }
    if cfg.ratios.iter().any(|r| !(*r >= 0.0)) || !(cfg.ratios.iter().sum::<f64>() > 0.0) {
        return Err(DataError::InvalidRatios(cfg.ratios));
    }
    let mut by_tag: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, w) in waves.iter().enumerate() {
        by_tag.entry(w.tag_id).or_default().push(i);
    }
    let mut split = CommSplit::default();
    for (&tag, idx) in by_tag.iter_mut() {
        if idx.len() < MIN_COMMS_PER_TAG {
            return Err(DataError::TooFewCommunications {
                tag_id: tag,
                available: idx.len(),
            });
        }
        idx.shuffle(&mut substream(cfg.seed, &[purpose::SPLIT, u64::from(tag)]));
        let keep = ((cfg.fraction * idx.len() as f64).round() as usize).clamp(1, idx.len());
        let (tr, va, te) = partition_sizes(keep, cfg.ratios);
        if te == 0 || va == 0 || tr == 0 {
            return Err(DataError::TooFewCommunications {
                tag_id: tag,
                available: keep,
            });
        }
        split.train.extend_from_slice(&idx[..tr]);
        split.validation.extend_from_slice(&idx[tr..tr + va]);
        split.test.extend_from_slice(&idx[tr + va..tr + va + te]);
    }
    Ok(split)
}

/// Splits by communication, then slices each partition into windows.
pub fn split_corpus(waves: &[IQWaveform], cfg: &SplitConfig) -> Result<SplitDataset, DataError> {
    let split = split_indices(waves, cfg)?;
    let opts = SliceOptions {
        standardize: cfg.standardize,
    };
    let slices = |idx: &[usize]| -> Result<Vec<SliceExample>, DataError> {
        let mut out = Vec::new();
        for &i in idx {
            out.extend(slice_waveform_with(&waves[i], cfg.window, opts)?);
        }
        Ok(out)
    };
    Ok(SplitDataset {
        train: slices(&split.train)?,
        validation: slices(&split.validation)?,
        test: slices(&split.test)?,
        fraction_used: cfg.fraction,
    })
}
