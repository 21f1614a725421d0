//! Generic mini-batch training loop with a learning-rate grid and early
//! stopping on a development metric.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::losses::LossValue;
use crate::error::{Error, Result};
use crate::neural::{AdamConfig, AdamState, EncoderModel, Grads, Real, Rng};

/// Something trainable: batches of item indices and a development metric.
pub trait Task<T: Real> {
    fn train_len(&self) -> usize;

    /// Mean loss over the items; accumulates gradients when given a buffer.
    /// `aux` drives task-side randomness such as masking.
    fn batch_loss(
        &self,
        model: &EncoderModel<T>,
        items: &[usize],
        grads: Option<&mut Grads<T>>,
        dropout: Option<&mut Rng>,
        aux: &mut Rng,
    ) -> Result<LossValue>;

    fn dev_metric(&self, model: &EncoderModel<T>) -> Result<f64>;

    fn higher_is_better(&self) -> bool;

    fn metric_name(&self) -> &'static str;
}

pub const LR_GRID: [f64; 4] = [1e-4, 5e-5, 1e-5, 1e-6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lrs: Vec<f64>,
    pub patience: usize,
    pub seed: u64,
    /// Caps the number of optimizer steps per epoch.
    #[serde(default)]
    pub max_batches_per_epoch: Option<usize>,
    #[serde(default = "yes")]
    pub dropout: bool,
}

fn yes() -> bool {
    true
}

impl Schedule {
    /// 30 epochs, batches of 32, the four-rate grid, patience 3.
    pub fn specialization(seed: u64) -> Self {
        Schedule {
            epochs: 30,
            batch_size: 32,
            lrs: LR_GRID.to_vec(),
            patience: 3,
            seed,
            max_batches_per_epoch: None,
            dropout: true,
        }
    }

    /// 300 epochs at a fixed 5e-5, patience 10; batch 6 for DST, 24 for RR.
    pub fn downstream(batch_size: usize, seed: u64) -> Self {
        Schedule {
            epochs: 300,
            batch_size,
            lrs: vec![5e-5],
            patience: 10,
            seed,
            max_batches_per_epoch: None,
            dropout: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.lrs.is_empty() || self.patience == 0 {
            return Err(Error::InvalidArgument(
                "epochs, batch size, patience and the learning-rate list must be non-empty".into(),
            ));
        }
        if self.lrs.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::InvalidArgument(
                "learning rates must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Counts epochs without improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub higher_is_better: bool,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, higher_is_better: bool) -> Self {
        EarlyStopping {
            patience,
            higher_is_better,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Returns (improved, stop).
    pub fn update(&mut self, metric: f64) -> (bool, bool) {
        let improved = match self.best {
            None => true,
            Some(b) => {
                if self.higher_is_better {
                    metric > b
                } else {
                    metric < b
                }
            }
        };
        if improved {
            self.best = Some(metric);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        (improved, self.bad_epochs >= self.patience)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub lr: f64,
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_metric: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub metric: String,
    pub epochs: Vec<EpochLog>,
    /// Learning rates abandoned after a non-finite loss, with the reason.
    pub diverged: Vec<(f64, String)>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: EncoderModel<T>,
    pub log: TrainLog,
    pub best_lr: f64,
    pub best_metric: f64,
    pub best_epoch: usize,
}

fn better(a: f64, b: f64, higher: bool) -> bool {
    if higher {
        a > b
    } else {
        a < b
    }
}

/// Trains a copy of `model` once per learning rate and returns the copy
/// with the best development metric over all rates and epochs.
pub fn train<T: Real, K: Task<T>>(
    model: &EncoderModel<T>,
    task: &K,
    schedule: &Schedule,
) -> Result<TrainOutcome<T>> {
    schedule.validate()?;
    let n = task.train_len();
    if n == 0 {
        return Err(Error::InvalidArgument("no training items".into()));
    }
    let higher = task.higher_is_better();
    let mut log = TrainLog {
        metric: task.metric_name().to_string(),
        ..Default::default()
    };
    let mut best: Option<TrainOutcome<T>> = None;
    'grid: for &lr in &schedule.lrs {
        let mut current = model.clone();
        let mut adam = AdamState::new(AdamConfig::with_lr(lr));
        let mut order_rng = Rng::seed_from_u64(schedule.seed);
        let mut dropout_rng = Rng::seed_from_u64(schedule.seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut aux_rng = Rng::seed_from_u64(schedule.seed.wrapping_add(1));
        let mut stopper = EarlyStopping::new(schedule.patience, higher);
        let mut grads = Grads::zeros_like(&current.params);
        let mut best_here: Option<(f64, usize, EncoderModel<T>)> = None;
        let mut order: Vec<usize> = (0..n).collect();
        for epoch in 1..=schedule.epochs {
            order.shuffle(&mut order_rng);
            let (mut loss_sum, mut loss_n) = (0.0, 0usize);
            let batches = order.chunks(schedule.batch_size);
            let limit = schedule.max_batches_per_epoch.unwrap_or(usize::MAX);
            for items in batches.take(limit) {
                grads.zero();
                let dropout = schedule.dropout.then_some(&mut dropout_rng);
                let lv =
                    task.batch_loss(&current, items, Some(&mut grads), dropout, &mut aux_rng)?;
                if !lv.loss.is_finite() || !grads.all_finite() {
                    log.diverged
                        .push((lr, format!("non-finite loss at epoch {epoch}")));
                    continue 'grid;
                }
                adam.step(&mut current.params, &grads)?;
                loss_sum += lv.loss * lv.count as f64;
                loss_n += lv.count;
            }
            let metric = task.dev_metric(&current)?;
            if !metric.is_finite() {
                log.diverged
                    .push((lr, format!("non-finite dev metric at epoch {epoch}")));
                continue 'grid;
            }
            let (improved, stop) = stopper.update(metric);
            log.epochs.push(EpochLog {
                lr,
                epoch,
                train_loss: if loss_n > 0 {
                    loss_sum / loss_n as f64
                } else {
                    0.0
                },
                dev_metric: metric,
                improved,
            });
            if improved {
                best_here = Some((metric, epoch, current.clone()));
            }
            if stop {
                break;
            }
        }
        if let Some((metric, epoch, m)) = best_here {
            if best
                .as_ref()
                .is_none_or(|b| better(metric, b.best_metric, higher))
            {
                best = Some(TrainOutcome {
                    model: m,
                    log: TrainLog::default(),
                    best_lr: lr,
                    best_metric: metric,
                    best_epoch: epoch,
                });
            }
        }
    }
    match best {
        Some(mut b) => {
            b.log = log;
            Ok(b)
        }
        None => Err(Error::Diverged(format!(
            "every learning rate diverged: {:?}",
            log.diverged
        ))),
    }
}
