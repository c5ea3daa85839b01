//! Deterministic single-threaded training with AdamW and a per-step cosine
//! schedule.

use std::collections::BTreeMap;
use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::Model;
use super::optim::{cosine_lr, AdamW};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::metrics::{MetricsAccumulator, RegionMetrics};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Cosine annealing to zero over all steps.
    Cosine,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub seed: u64,
    pub schedule: LrSchedule,
    /// Test images scored after each epoch; 0 disables validation.
    pub val_images: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            epochs: 300,
            batch_size: 1,
            weight_decay: 0.01,
            betas: [0.9, 0.999],
            eps: 1e-8,
            seed: 0,
            schedule: LrSchedule::Cosine,
            val_images: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got {:?}", self.betas)));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW::new(self.betas[0], self.betas[1], self.eps, self.weight_decay)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_l1: f64,
    pub val: Option<RegionMetrics>,
}

/// Training state that can be checkpointed and resumed.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub total_steps: usize,
}

/// Scores `model` on `samples` with the metrics of [`crate::metrics`].
pub fn evaluate_model(model: &Model, samples: &[Sample]) -> Result<RegionMetrics> {
    let mut acc = MetricsAccumulator::default();
    for s in samples {
        let pred = model.forward(&s.shadow, &s.mask)?;
        acc.add(&pred, &s.free, &s.mask)?;
    }
    Ok(acc.summary())
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, train_len: usize) -> Result<Self> {
        config.validate()?;
        if train_len == 0 {
            return Err(Error::Dataset("training set is empty".into()));
        }
        Ok(Self {
            model,
            optimizer: config.optimizer(),
            total_steps: config.epochs * config.steps_per_epoch(train_len),
            config,
            epoch: 0,
            step: 0,
        })
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.config.schedule {
            LrSchedule::Cosine => cosine_lr(self.config.lr, step, self.total_steps),
            LrSchedule::Constant => self.config.lr,
        }
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Visiting order for `epoch`: a permutation drawn from the stream
    /// `(seed, epoch)`, so resuming at any epoch reproduces it.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Runs one epoch; returns the mean training L1.
    pub fn run_epoch(&mut self, train: &[Sample]) -> Result<(f64, f64)> {
        if train.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let order = self.epoch_order(self.epoch, train.len());
        let mut loss_sum = 0.0;
        let mut lr = self.lr_at(self.step);
        for batch in order.chunks(self.config.batch_size) {
            let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = &train[i];
                let (loss, grads) = self.model.loss_and_grads(&s.shadow, &s.mask, &s.free)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        epoch: self.epoch,
                        step: self.step,
                    });
                }
                batch_loss += loss;
                for (name, g) in grads {
                    match acc.get_mut(&name) {
                        Some(a) => a.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => {
                            acc.insert(name, g);
                        }
                    }
                }
            }
            if batch.len() > 1 {
                let scale = 1.0 / batch.len() as f64;
                acc.values_mut().flatten().for_each(|v| *v *= scale);
            }
            lr = self.lr_at(self.step);
            self.optimizer.update(&mut self.model.params, &acc, lr)?;
            self.step += 1;
            loss_sum += batch_loss;
        }
        self.epoch += 1;
        Ok((loss_sum / train.len() as f64, lr))
    }

    /// Trains the remaining epochs, calling `on_epoch` after each; it may
    /// break to stop early.
    pub fn fit(
        &mut self,
        train: &[Sample],
        val: &[Sample],
        mut on_epoch: impl FnMut(&Trainer, &EpochRecord) -> Result<ControlFlow<()>>,
    ) -> Result<Vec<EpochRecord>> {
        let mut log = Vec::new();
        let val = &val[..val.len().min(self.config.val_images)];
        while !self.is_done() {
            let (train_l1, lr) = self.run_epoch(train)?;
            let val_metrics = if val.is_empty() {
                None
            } else {
                Some(evaluate_model(&self.model, val)?)
            };
            let record = EpochRecord {
                epoch: self.epoch,
                step: self.step,
                lr,
                train_l1,
                val: val_metrics,
            };
            log::info!("epoch {} step {} lr {:.3e} train_l1 {:.4}", record.epoch, record.step, lr, train_l1);
            let flow = on_epoch(self, &record)?;
            log.push(record);
            if flow.is_break() {
                break;
            }
        }
        Ok(log)
    }
}

/// Trains `model` from scratch; returns it with the per-epoch log.
pub fn train(model: Model, train: &[Sample], val: &[Sample], config: TrainConfig) -> Result<(Model, Vec<EpochRecord>)> {
    let mut t = Trainer::new(model, config, train.len())?;
    let log = t.fit(train, val, |_, _| Ok(ControlFlow::Continue(())))?;
    Ok((t.model, log))
}
