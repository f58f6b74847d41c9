//! Mini-batch training loop with early stopping and plateau learning-rate
//! reduction.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ParallelNetMini;
use crate::loss::{combined_loss_grad, one_hot, LossConfig};
use crate::optim::Adam;
use crate::synth::Sample;
use crate::tensor::{argmax, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Stop after this many epochs without improvement of the monitored loss.
    pub early_stopping_patience: usize,
    /// Reduce the learning rate after this many epochs without improvement.
    pub lr_patience: usize,
    pub lr_factor: f64,
    pub loss: LossConfig,
    /// Seeds batch shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            learning_rate: 8e-6,
            early_stopping_patience: 5,
            lr_patience: 2,
            lr_factor: 0.5,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy of the training-mode predictions made during the epoch.
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    /// Rate in effect during the epoch.
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_accuracy,val_loss,val_accuracy,learning_rate\n");
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch,
                r.train_loss,
                r.train_accuracy,
                opt(r.val_loss),
                opt(r.val_accuracy),
                r.learning_rate
            )
            .unwrap();
        }
        out
    }
}

fn batch_tensors(samples: &[&Sample]) -> Result<(Tensor, Tensor)> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let speech: Vec<&Tensor> = samples.iter().map(|s| &s.speech).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&speech)?))
}

fn check_labels(samples: &[Sample], classes: usize) -> Result<()> {
    match samples.iter().find(|s| s.label >= classes) {
        Some(s) => Err(Error::invalid("label", format!("{} with {classes} classes", s.label))),
        None => Ok(()),
    }
}

/// Mean loss and accuracy in inference mode.
pub fn evaluate(model: &ParallelNetMini, samples: &[Sample], loss: &LossConfig) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation set", "no samples"));
    }
    let classes = model.config().classes;
    check_labels(samples, classes)?;
    let mut total = 0.0;
    let mut correct = 0;
    for chunk in samples.chunks(64) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (img, sp) = batch_tensors(&refs)?;
        let probs = model.forward(&img, &sp)?;
        for (p, s) in probs.data().chunks(classes).zip(chunk) {
            total += combined_loss_grad(p, &one_hot(s.label, classes), loss)?.0;
            correct += (argmax(p) == s.label) as usize;
        }
    }
    Ok((total / samples.len() as f64, correct as f64 / samples.len() as f64))
}

/// Predicted class per sample, in inference mode.
pub fn predict_labels(model: &ParallelNetMini, samples: &[Sample]) -> Result<Vec<usize>> {
    let classes = model.config().classes;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (img, sp) = batch_tensors(&refs)?;
        out.extend(model.forward(&img, &sp)?.data().chunks(classes).map(argmax));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PlateauStep {
    reduce_lr: bool,
    stop: bool,
}

/// Patience counters for early stopping and learning-rate reduction. Both
/// reset on improvement; the reduction counter also resets after firing.
#[derive(Debug, Clone)]
struct Plateau {
    best: f64,
    stall: usize,
    lr_stall: usize,
    patience: usize,
    lr_patience: usize,
}

impl Plateau {
    fn new(config: &TrainConfig) -> Self {
        Plateau {
            best: f64::INFINITY,
            stall: 0,
            lr_stall: 0,
            patience: config.early_stopping_patience,
            lr_patience: config.lr_patience,
        }
    }

    fn observe(&mut self, loss: f64) -> PlateauStep {
        if loss < self.best {
            self.best = loss;
            self.stall = 0;
            self.lr_stall = 0;
            return PlateauStep {
                reduce_lr: false,
                stop: false,
            };
        }
        self.stall += 1;
        self.lr_stall += 1;
        let reduce_lr = self.lr_stall >= self.lr_patience;
        if reduce_lr {
            self.lr_stall = 0;
        }
        PlateauStep {
            reduce_lr,
            stop: self.stall >= self.patience,
        }
    }
}

fn diverged(epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::Diverged {
            epoch,
            batch,
            loss: f64::NAN,
        },
        other => other,
    }
}

/// Trains `model` in place. The loss monitored for early stopping and
/// learning-rate reduction is the validation loss when `validation` is
/// non-empty, otherwise the training loss.
pub fn train_toy(
    model: &mut ParallelNetMini,
    train: &[Sample],
    validation: &[Sample],
    config: &TrainConfig,
) -> Result<History> {
    if train.is_empty() {
        return Err(Error::invalid("training set", "no samples"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size", "must be positive"));
    }
    if !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
        return Err(Error::invalid("learning rate", format!("{}", config.learning_rate)));
    }
    let classes = model.config().classes;
    check_labels(train, classes)?;
    check_labels(validation, classes)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Adam::new(config.learning_rate);
    let mut history = History::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut schedule = Plateau::new(config);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let lr = optimizer.learning_rate;
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (batch_index, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let (img, sp) = batch_tensors(&batch)?;
            let probs = model.forward_train(&img, &sp).map_err(diverged(epoch, batch_index))?;
            let mut grad = Vec::with_capacity(probs.len());
            let mut batch_loss = 0.0;
            for (p, s) in probs.data().chunks(classes).zip(&batch) {
                let (l, g) = combined_loss_grad(p, &one_hot(s.label, classes), &config.loss)
                    .map_err(diverged(epoch, batch_index))?;
                batch_loss += l;
                correct += (argmax(p) == s.label) as usize;
                grad.extend(g.into_iter().map(|v| v / batch.len() as f64));
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_index,
                    loss: batch_loss,
                });
            }
            loss_sum += batch_loss;
            model.backward(&Tensor::new(probs.shape().to_vec(), grad)?)?;
            optimizer.step(model.params_mut());
        }
        let train_loss = loss_sum / train.len() as f64;
        let (val_loss, val_accuracy) = if validation.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate(model, validation, &config.loss).map_err(diverged(epoch, 0))?;
            (Some(l), Some(a))
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            train_accuracy: correct as f64 / train.len() as f64,
            val_loss,
            val_accuracy,
            learning_rate: lr,
        });

        let step = schedule.observe(val_loss.unwrap_or(train_loss));
        if step.reduce_lr {
            optimizer.learning_rate *= config.lr_factor;
        }
        if step.stop {
            history.stopped_early = true;
            break;
        }
    }
    Ok(history)
}
