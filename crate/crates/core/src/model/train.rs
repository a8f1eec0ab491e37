//! Mini-batch training with AdamW.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Model, ModelError, PreparedInputs};
use crate::geometry::SaliencyMap;
use crate::tensor::{AdamW, AdamWConfig};

/// One training triplet with its features already prepared.
#[derive(Clone, Debug)]
pub struct Sample {
    pub inputs: PreparedInputs,
    pub gt: SaliencyMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub optim: AdamWConfig,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch: 8,
            optim: AdamWConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    /// Mean loss of the batch before the update.
    pub loss: f64,
}

/// Optimizer state across steps.
pub struct Trainer {
    optim: AdamW<f32>,
}

impl Trainer {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            optim: AdamW::new(config),
        }
    }

    /// One update on the mean loss of `batch`; returns that loss.
    pub fn step(&mut self, model: &mut Model, batch: &[&Sample]) -> Result<f64, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let per_sample = batch
            .par_iter()
            .map(|s| model.loss_and_grads(&s.inputs, &s.gt))
            .collect::<Result<Vec<_>, _>>()?;
        let n = batch.len() as f32;
        let mut grads: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        let mut loss = 0.0;
        for (l, g) in per_sample {
            loss += l;
            for (k, d) in g {
                match grads.get_mut(&k) {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(k, d);
                    }
                }
            }
        }
        grads.values_mut().for_each(|g| g.iter_mut().for_each(|v| *v /= n));
        self.optim.step(model.params_mut(), &grads);
        Ok(loss / batch.len() as f64)
    }
}

/// Trains for `cfg.epochs` passes over shuffled mini-batches, calling `log`
/// after every step.
pub fn train(model: &mut Model, samples: &[Sample], cfg: &TrainConfig, mut log: impl FnMut(&StepLog)) -> Result<Vec<StepLog>, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if cfg.batch == 0 {
        return Err(ModelError::Config("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trainer = Trainer::new(cfg.optim.clone());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut logs = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let loss = trainer.step(model, &batch)?;
            let entry = StepLog { epoch, step, loss };
            log(&entry);
            logs.push(entry);
            step += 1;
        }
    }
    Ok(logs)
}
