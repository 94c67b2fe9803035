//! Bag-level loss, Adam, the staged learning-rate schedule and the epoch loop.

mod adam;
mod gradcheck;

use std::fmt::Write as _;
use std::ops::ControlFlow;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState};
pub use gradcheck::{gradcheck, gradcheck_network, gradcheck_profile, CoordinateCheck, GradcheckOptions, GradcheckReport};

use crate::autodiff::LOG_FLOOR;
use crate::data::LabeledDataset;
use crate::error::{io_err, Error, Result};
use crate::mil::argmax;
use crate::model::Network;
use crate::nn::{Forward, Mode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Epochs per learning-rate stage.
    pub stage_epochs: usize,
    pub lr_factor: f64,
    pub lr_min: f64,
    /// Coupled L2 coefficient, applied to weights only.
    pub weight_decay: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Optional hard cap on epochs, on top of the schedule.
    pub max_epochs: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            stage_epochs: 40,
            lr_factor: 0.1,
            lr_min: 1e-6,
            weight_decay: 1e-6,
            dropout: 0.2,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
            max_epochs: None,
        }
    }
}

impl TrainConfig {
    /// Desk-scale defaults: batch 8, otherwise unchanged.
    pub fn desk() -> Self {
        Self {
            batch_size: 8,
            ..Self::default()
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            v.push(format!("train.lr0 {} must be positive", self.lr0));
        }
        if !(self.lr_min > 0.0 && self.lr_min < self.lr0) {
            v.push(format!("train.lr_min {} must lie in (0, lr0)", self.lr_min));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            v.push(format!("train.lr_factor {} must lie in (0, 1)", self.lr_factor));
        }
        if self.stage_epochs == 0 {
            v.push("train.stage_epochs must be positive".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            v.push(format!("train.weight_decay {} must be non-negative", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            v.push(format!("train.dropout {} must lie in [0, 1)", self.dropout));
        }
        if self.batch_size == 0 {
            v.push("train.batch_size must be at least 1".into());
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            v.push(format!("train.adam {a:?} needs betas in [0, 1) and eps > 0"));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// `-ln(max(p[label], 1e-12))` for one bag.
pub fn cross_entropy_bag(p_bag: &[f64], label: usize) -> Result<f64> {
    if label >= p_bag.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: p_bag.len(),
        });
    }
    let total: f64 = p_bag.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("p_bag sums to {total}, not 1")));
    }
    Ok(-p_bag[label].max(LOG_FLOOR).ln())
}

/// `lr0 · lr_factor^floor(epoch / stage_epochs)`, or `None` once that drops
/// below `lr_min` and training should stop.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> Option<f64> {
    let stage = (epoch / config.stage_epochs.max(1)) as i32;
    let lr = config.lr0 * config.lr_factor.powi(stage);
    // Relative slack so 1e-3 · 0.1³ still counts as 1e-6.
    (lr >= config.lr_min * (1.0 - 1e-9)).then_some(lr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    /// Percent of training bags whose train-mode prediction was correct.
    pub train_acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Schedule,
    MaxEpochs,
    Callback,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub adam: AdamState,
    pub stop: StopReason,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,lr,mean_loss,train_acc\n");
    for r in history {
        let _ = writeln!(out, "{},{},{},{}", r.epoch, r.lr, r.mean_loss, r.train_acc);
    }
    out
}

pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<()> {
    std::fs::write(path, history_csv(history)).map_err(io_err(path))
}

fn check_compatible(net: &Network, data: &LabeledDataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if data.num_classes() != net.num_classes() {
        return Err(Error::Config(vec![format!(
            "model has {} classes but the dataset has {}",
            net.num_classes(),
            data.num_classes()
        )]));
    }
    let size = data.image_size().unwrap_or(0);
    if size != net.config.input_size {
        return Err(Error::Config(vec![format!(
            "model expects {}px inputs but the dataset holds {size}px images",
            net.config.input_size
        )]));
    }
    Ok(())
}

pub fn train(net: &mut Network, data: &LabeledDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(net, data, config, |_, _| Ok(ControlFlow::Continue(())))
}

/// Runs the schedule to completion. `on_epoch` sees each finished epoch and
/// may stop training early.
pub fn train_with(
    net: &mut Network,
    data: &LabeledDataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Network) -> Result<ControlFlow<()>>,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_compatible(net, data)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(1);
    let mut adam = AdamState::new(&net.store);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch = 0;
    let stop = loop {
        let Some(lr) = lr_at_epoch(config, epoch) else {
            break StopReason::Schedule;
        };
        if config.max_epochs.is_some_and(|m| epoch >= m) {
            break StopReason::MaxEpochs;
        }
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let (images, labels) = data.batch(chunk);
            let mut fwd = Forward::new(&net.store, Mode::Train).with_dropout(config.dropout, dropout_rng);
            let x = fwd.input(images);
            let out = net.forward(&mut fwd, x)?;
            let loss = fwd.tape.bag_nll(out.p_bag, &labels)?;
            let value = fwd.tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    loss: value,
                });
            }
            let p = fwd.tape.value(out.p_bag);
            let nc = p.shape()[1];
            correct += labels
                .iter()
                .enumerate()
                .filter(|(i, &l)| argmax(&p.data()[i * nc..(i + 1) * nc]) == l)
                .count();
            loss_sum += value * chunk.len() as f64;
            fwd.backward(loss)?;
            let (updates, rng) = fwd.into_updates();
            dropout_rng = rng;
            net.store.zero_grad();
            net.store.apply_updates(&updates);
            adam_step(&mut net.store, &mut adam, lr, config)?;
        }
        let record = EpochRecord {
            epoch,
            lr,
            mean_loss: loss_sum / data.len() as f64,
            train_acc: 100.0 * correct as f64 / data.len() as f64,
        };
        let flow = on_epoch(&record, net)?;
        history.push(record);
        epoch += 1;
        if flow.is_break() {
            break StopReason::Callback;
        }
    };
    net.store.zero_grad();
    Ok(TrainOutcome { history, adam, stop })
}
