use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::optim::{clip_grad_norm, Adam, AdamConfig};
use super::pretrain::accumulate_units;
use crate::data::{ClassificationData, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{Mode, TransformerModel};
use crate::scalar::Scalar;
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    /// Constant learning rate.
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            epochs: 3,
            adam: AdamConfig::default(),
            grad_clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

/// Mini-batch classifier training, one step at a time. Examples are visited
/// in a fresh shuffled order every epoch.
#[derive(Clone, Debug)]
pub struct ClassifierTrainer<T> {
    pub config: FinetuneConfig,
    pub optimizer: Adam<T>,
    steps: u64,
    epoch: usize,
    order: Vec<usize>,
    cursor: usize,
}

impl<T: Scalar> ClassifierTrainer<T> {
    pub fn new(model: &TransformerModel<T>, config: FinetuneConfig) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        Ok(Self {
            optimizer: Adam::new(model.parameters(), config.adam),
            config,
            steps: 0,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Completed passes over the training data.
    pub fn epochs_completed(&self) -> usize {
        if self.order.is_empty() {
            0
        } else {
            self.epoch - 1 + usize::from(self.cursor >= self.order.len())
        }
    }

    pub fn steps_per_epoch(&self, data: &LabeledDataset) -> usize {
        data.len().div_ceil(self.config.batch_size)
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        if self.order.is_empty() || self.cursor >= self.order.len() {
            self.order = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(self.config.seed, self.epoch as u64));
            self.order.shuffle(&mut rng);
            self.cursor = 0;
            self.epoch += 1;
        }
        let end = (self.cursor + self.config.batch_size).min(n);
        let idx = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        idx
    }

    /// One optimizer step on the next mini-batch. Returns the batch loss.
    pub fn step(&mut self, model: &mut TransformerModel<T>, data: &LabeledDataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Empty("classification training set"));
        }
        let idx = self.next_batch(data.len());
        model.zero_grads();
        let norm = T::of(idx.len() as f64);
        let step = self.steps;
        let base = self.config.seed;
        let loss = accumulate_units(model, idx.len(), idx.len(), |m, u| {
            let i = idx[u];
            let mode = Mode::Train {
                seed: seed::derive(seed::derive(base ^ 0xc1a5, step), i as u64),
            };
            m.classify_gradients(data.row(i), &data.labels[i..i + 1], 1, mode, norm)
                .map(Some)
        })?;
        if let Some(max) = self.config.grad_clip_norm {
            clip_grad_norm(model.parameters_mut(), max);
        }
        self.optimizer.step(model.parameters_mut(), self.config.lr)?;
        self.steps += 1;
        Ok(loss.as_f64())
    }

    /// Runs `epochs` full passes.
    pub fn train_epochs(
        &mut self,
        model: &mut TransformerModel<T>,
        data: &LabeledDataset,
        epochs: usize,
    ) -> Result<()> {
        for _ in 0..epochs * self.steps_per_epoch(data) {
            self.step(model, data)?;
        }
        Ok(())
    }
}

/// Outcome of [`finetune_classifier`].
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneReport {
    pub steps: u64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

/// Trains all trainable parameters for `config.epochs` epochs.
pub fn finetune_classifier<T: Scalar>(
    model: &mut TransformerModel<T>,
    data: &ClassificationData,
    config: &FinetuneConfig,
) -> Result<FinetuneReport> {
    let mut trainer = ClassifierTrainer::new(model, config.clone())?;
    trainer.train_epochs(model, &data.train, config.epochs)?;
    Ok(FinetuneReport {
        steps: trainer.steps(),
        train_accuracy: accuracy(model, &data.train)?,
        val_accuracy: accuracy(model, &data.validation)?,
    })
}

/// Fraction of rows whose arg-max logit (lowest index on ties) equals the
/// label.
pub fn accuracy<T: Scalar>(model: &TransformerModel<T>, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("classification dataset"));
    }
    const CHUNK: usize = 64;
    let correct: Vec<usize> = (0..data.len().div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let rows = c * CHUNK..((c + 1) * CHUNK).min(data.len());
            let (tokens, labels) = data.rows(rows.clone());
            let logits = model.forward_classify(tokens, rows.len(), Mode::Eval)?;
            let k = logits.shape()[1];
            Ok(logits
                .data()
                .chunks(k)
                .zip(labels)
                .filter(|(row, &label)| argmax(row) == label as usize)
                .count())
        })
        .collect::<Result<_>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / data.len() as f64)
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
