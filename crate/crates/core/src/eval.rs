//! Overall accuracy and the repeated-split evaluation protocol.

use serde::{Deserialize, Serialize};

use crate::data::{stratified_split, LabeledDataset};
use crate::dccnn::DccnnConfig;
use crate::error::{Error, Result};
use crate::mil::MilConfig;
use crate::model::Network;
use crate::train::{train, TrainConfig, TrainOutcome};

/// Images per eval-mode forward pass.
pub const EVAL_BATCH: usize = 16;

/// `confusion[true][predicted]` counts.
pub type Confusion = Vec<Vec<usize>>;

pub fn overall_accuracy(confusion: &Confusion) -> f64 {
    let total: usize = confusion.iter().flatten().sum();
    let correct: usize = (0..confusion.len()).map(|i| confusion[i][i]).sum();
    100.0 * correct as f64 / total.max(1) as f64
}

pub fn confusion_from(labels: &[usize], predictions: &[usize], classes: usize) -> Confusion {
    let mut m = vec![vec![0; classes]; classes];
    for (&t, &p) in labels.iter().zip(predictions) {
        m[t][p] += 1;
    }
    m
}

/// Eval-mode predicted class for every item, in order.
pub fn predict_classes(net: &Network, data: &LabeledDataset) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (images, _) = data.batch(chunk);
        out.extend(net.predict(&images)?.iter().map(|p| p.predicted_class()));
    }
    Ok(out)
}

/// OA in percent and the confusion matrix.
pub fn evaluate_oa(net: &Network, test: &LabeledDataset) -> Result<(f64, Confusion)> {
    if test.is_empty() {
        return Err(Error::Dataset("test set is empty".into()));
    }
    if test.num_classes() != net.num_classes() {
        return Err(Error::Config(vec![format!(
            "model has {} classes but the test set has {}",
            net.num_classes(),
            test.num_classes()
        )]));
    }
    let predictions = predict_classes(net, test)?;
    let labels: Vec<usize> = test.items.iter().map(|i| i.label).collect();
    let confusion = confusion_from(&labels, &predictions, test.num_classes());
    Ok((overall_accuracy(&confusion), confusion))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_rep_oa: Vec<f64>,
    pub mean_oa: f64,
    /// Sample standard deviation (n − 1); 0 for a single repetition.
    pub std_oa: f64,
    /// Confusion matrix of the last repetition.
    pub confusion: Confusion,
}

impl EvalReport {
    pub fn from_reps(per_rep_oa: Vec<f64>, confusion: Confusion) -> Self {
        let n = per_rep_oa.len() as f64;
        let mean_oa = per_rep_oa.iter().sum::<f64>() / n;
        let std_oa = if per_rep_oa.len() > 1 {
            (per_rep_oa.iter().map(|v| (v - mean_oa).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            per_rep_oa,
            mean_oa,
            std_oa,
            confusion,
        }
    }
}

/// Split seeds and per-repetition seeds of a protocol run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolSeeds {
    /// Repetition r splits with `split_base + r`.
    pub split_base: u64,
    /// Repetition r initializes and trains with `model_base + r`.
    pub model_base: u64,
}

/// Repeats split → `run` → score `repetitions` times. `run` receives the
/// repetition index and both halves and returns the OA and confusion.
pub fn protocol_with(
    dataset: &LabeledDataset,
    train_ratio: f64,
    repetitions: usize,
    split_base: u64,
    mut run: impl FnMut(usize, &LabeledDataset, &LabeledDataset) -> Result<(f64, Confusion)>,
) -> Result<EvalReport> {
    if repetitions == 0 {
        return Err(Error::InvalidArgument("repetitions must be at least 1".into()));
    }
    let mut per_rep = Vec::with_capacity(repetitions);
    let mut confusion = Vec::new();
    for r in 0..repetitions {
        let (train_set, test_set) = stratified_split(dataset, train_ratio, split_base.wrapping_add(r as u64))?;
        let (oa, c) = run(r, &train_set, &test_set)?;
        per_rep.push(oa);
        confusion = c;
    }
    Ok(EvalReport::from_reps(per_rep, confusion))
}

/// Per-repetition callback payload for progress reporting.
pub struct RepResult<'a> {
    pub rep: usize,
    pub oa: f64,
    pub network: &'a Network,
    pub outcome: &'a TrainOutcome,
}

/// Everything a protocol run needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolSpec {
    pub dccnn: DccnnConfig,
    pub mil: MilConfig,
    pub train: TrainConfig,
    pub train_ratio: f64,
    pub repetitions: usize,
    pub seeds: ProtocolSeeds,
}

/// Fresh split, fresh initialization, full training and evaluation per
/// repetition.
pub fn protocol(
    dataset: &LabeledDataset,
    spec: &ProtocolSpec,
    mut on_rep: impl FnMut(&RepResult) -> Result<()>,
) -> Result<EvalReport> {
    let seeds = spec.seeds;
    protocol_with(dataset, spec.train_ratio, spec.repetitions, seeds.split_base, |r, train_set, test_set| {
        let seed = seeds.model_base.wrapping_add(r as u64);
        let cfg = DccnnConfig {
            seed,
            ..spec.dccnn.clone()
        };
        let mut net = Network::new(&cfg, &spec.mil)?;
        let tc = TrainConfig {
            seed,
            ..spec.train.clone()
        };
        let outcome = train(&mut net, train_set, &tc)?;
        let (oa, confusion) = evaluate_oa(&net, test_set)?;
        on_rep(&RepResult {
            rep: r,
            oa,
            network: &net,
            outcome: &outcome,
        })?;
        Ok((oa, confusion))
    })
}
