use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::forward::{forward, loss_and_grads, softmax_cross_entropy};
use super::{Dataset, Model, SgdMomentum, Split};
use crate::{Error, Result};

const EVAL_BATCH: usize = 256;

/// Optimizer and early-stopping settings. Defaults: SGD learning rate 0.01,
/// momentum 0.9, weight decay 1e-4, patience 3 epochs, minimum relative
/// improvement 5%.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub patience: usize,
    /// Minimum improvement of validation loss, relative to the best loss so far.
    pub min_delta: f32,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0001,
            patience: 3,
            min_delta: 0.05,
            max_epochs: 20,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight_decay must be >= 0");
        }
        if self.patience < 1 {
            return fail("patience must be >= 1");
        }
        if !(0.0..1.0).contains(&self.min_delta) {
            return fail("min_delta must lie in [0, 1)");
        }
        if self.max_epochs < 1 {
            return fail("max_epochs must be >= 1");
        }
        if self.batch_size < 1 {
            return fail("batch_size must be >= 1");
        }
        Ok(())
    }
}

/// Stops once `patience` consecutive epochs improve on the best validation
/// loss by less than `min_delta` (relative).
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: Option<f64>,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f32) -> Self {
        Self {
            patience,
            min_delta: f64::from(min_delta),
            best: None,
            wait: 0,
        }
    }

    /// Records one epoch's validation loss; true means stop now.
    pub fn observe(&mut self, loss: f32) -> bool {
        let loss = f64::from(loss);
        match self.best {
            None => {
                self.best = Some(loss);
                false
            }
            Some(best) => {
                let improvement = if best > 0.0 { (best - loss) / best } else { 0.0 };
                if improvement >= self.min_delta {
                    self.best = Some(loss);
                    self.wait = 0;
                } else {
                    self.wait += 1;
                }
                self.wait >= self.patience
            }
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

/// Receives epoch boundaries during training.
pub trait EpochObserver {
    fn epoch_end(&mut self, epoch: usize, validation_loss: f32);
}

impl EpochObserver for () {
    fn epoch_end(&mut self, _epoch: usize, _validation_loss: f32) {}
}

impl<F: FnMut(usize, f32)> EpochObserver for F {
    fn epoch_end(&mut self, epoch: usize, validation_loss: f32) {
        self(epoch, validation_loss)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub final_train_loss: f32,
    pub validation_loss_history: Vec<f32>,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    cleared_bits: u32,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, cleared_bits: 0 })
    }

    /// Re-clears the lowest `bits` bits of every parameter after each step.
    pub fn with_cleared_bits(mut self, bits: u32) -> Result<Self> {
        if bits > 32 {
            return Err(Error::BitCountOutOfRange(bits));
        }
        self.cleared_bits = bits;
        Ok(self)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Mini-batch training with seeded shuffling until early stopping fires
    /// or `max_epochs` is reached. The observer sees the end of every epoch.
    pub fn train(
        &self,
        model: &mut Model,
        dataset: &Dataset,
        observer: &mut dyn EpochObserver,
    ) -> Result<TrainSummary> {
        if dataset.train.is_empty() {
            return Err(Error::EmptySplit);
        }
        if dataset.train.dim() != model.input_len() {
            return Err(Error::InvalidDataset(format!(
                "samples have dimension {}, model expects {}",
                dataset.train.dim(),
                model.input_len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut opt = SgdMomentum::new(model).with_cleared_bits(self.cleared_bits)?;
        let mut stopper = EarlyStopping::new(self.cfg.patience, self.cfg.min_delta);
        let mut order: Vec<usize> = (0..dataset.train.len()).collect();
        let mut history = Vec::new();
        let mut final_train_loss = 0.0f32;

        for epoch in 1..=self.cfg.max_epochs {
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0f64;
            for chunk in order.chunks(self.cfg.batch_size) {
                let (x, y) = dataset.train.batch(chunk);
                let (loss, grads) = loss_and_grads(model, &x, &y)?;
                opt.step(model, &grads, &self.cfg)?;
                loss_sum += f64::from(loss) * chunk.len() as f64;
            }
            final_train_loss = (loss_sum / order.len() as f64) as f32;
            let val_loss = mean_loss(model, &dataset.validation)? as f32;
            history.push(val_loss);
            observer.epoch_end(epoch, val_loss);
            if stopper.observe(val_loss) {
                break;
            }
        }

        Ok(TrainSummary {
            epochs_run: history.len(),
            final_train_loss,
            validation_loss_history: history,
            test_accuracy: evaluate(model, &dataset.test)?,
        })
    }
}

/// Fraction of samples whose argmax logit equals the label. Ties go to the
/// lowest class index.
pub fn evaluate(model: &Model, split: &Split) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut correct = 0usize;
    let mut start = 0;
    while start < split.len() {
        let end = (start + EVAL_BATCH).min(split.len());
        let (x, labels) = split.range(start, end);
        let logits = forward(model, &x)?;
        for (i, &label) in labels.iter().enumerate() {
            if argmax(logits.row(i)) == label as usize {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / split.len() as f64)
}

/// Mean softmax cross-entropy over a split.
pub fn mean_loss(model: &Model, split: &Split) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut total = 0.0f64;
    let mut start = 0;
    while start < split.len() {
        let end = (start + EVAL_BATCH).min(split.len());
        let (x, labels) = split.range(start, end);
        if let Some(&label) = labels.iter().find(|&&l| l as usize >= model.class_count()) {
            return Err(Error::LabelOutOfRange {
                label,
                class_count: model.class_count(),
            });
        }
        let logits = forward(model, &x)?;
        let (loss, _) = softmax_cross_entropy(&logits, labels);
        total += f64::from(loss) * (end - start) as f64;
        start = end;
    }
    Ok(total / split.len() as f64)
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
