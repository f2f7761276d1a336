use rand_chacha::ChaCha8Rng;

use super::FedError;
use crate::augment::{augment_slices, AugmentConfig};
use crate::datapipe::{SliceExample, SplitDataset};
use crate::neuralnet::{train_epoch, ArchConfig, ModelState, Network};
use crate::rng::{purpose, substream};

/// A reader with its local data, model and optimizer state.
///
/// Weights are replaced wholesale by the server; the Adam moments stay local
/// across rounds.
#[derive(Debug, Clone)]
pub struct ReaderClient {
    pub reader_id: u32,
    /// Training slices, already augmented when augmentation is on.
    pub train: Vec<SliceExample>,
    pub validation: Vec<SliceExample>,
    pub test: Vec<SliceExample>,
    pub model: ModelState<f32>,
    pub batch_size: usize,
    rng: ChaCha8Rng,
}

impl ReaderClient {
    /// `seed` drives the reader's shuffling; the model starts from a
    /// placeholder init that the server overwrites.
    pub fn new(
        reader_id: u32,
        data: SplitDataset,
        arch: &ArchConfig,
        augment: Option<&AugmentConfig>,
        seed: u64,
    ) -> Result<Self, FedError> {
        if data.train.is_empty() {
            return Err(FedError::InvalidConfig(format!("reader {reader_id} has no training data")));
        }
        let train = match augment {
            Some(cfg) => {
                let cfg = AugmentConfig {
                    phi: cfg.phi.clone(),
                    seed: crate::rng::derive_seed(cfg.seed, &[u64::from(reader_id)]),
                };
                augment_slices(&data.train, &cfg)?
            }
            None => data.train,
        };
        Ok(Self {
            reader_id,
            train,
            validation: data.validation,
            test: data.test,
            model: ModelState::new(arch, seed)?,
            batch_size: 64,
            rng: substream(seed, &[purpose::SHUFFLE, u64::from(reader_id)]),
        })
    }

    pub fn example_count(&self) -> u64 {
        self.train.len() as u64
    }

    pub fn network(&self) -> &Network<f32> {
        &self.model.network
    }

    pub fn weights(&self) -> Vec<f32> {
        self.model.network.flat_params()
    }

    pub fn install(&mut self, flat: &[f32]) -> Result<(), FedError> {
        Ok(self.model.network.set_flat_params(flat)?)
    }

    /// Runs `epochs` local epochs; returns the last epoch's loss.
    pub fn train_local(&mut self, epochs: u64) -> Result<Option<f64>, FedError> {
        let mut last = None;
        for _ in 0..epochs {
            last = Some(train_epoch(&mut self.model, &self.train, self.batch_size, &mut self.rng)?);
        }
        Ok(last)
    }
}
