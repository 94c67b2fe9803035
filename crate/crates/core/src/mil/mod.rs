//! Instance classifier and MIL pooling.
//!
//! Each position (i, j) of the feature map F is one instance. A 1×1 conv
//! with N_c filters turns it into a class-score vector, a per-position softmax
//! gives instance probabilities p_ij, and a pooling function folds those into
//! the bag prediction. Attention pooling computes
//! `a_ij = softmax_ij(w2 · tanh(W1 F_ij + b))` and returns `Σ a_ij p_ij`.

mod export;

use serde::{Deserialize, Serialize};

pub use export::{export_attention_map, AttentionArtifacts};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Forward, ParamId, ParamKind, ParamStore, SCORE_INIT_GAIN};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMethod {
    Attention,
    Mean,
    /// Per-class maximum over instances, renormalized to sum to one.
    Max,
}

impl PoolingMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolingMethod::Attention => "attention",
            PoolingMethod::Mean => "mean",
            PoolingMethod::Max => "max",
        }
    }
}

/// Which per-instance vector feeds the attention network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionInput {
    /// Pre-softmax instance scores.
    Logits,
    /// Post-softmax instance probabilities.
    Probs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MilConfig {
    pub hidden_dim: usize,
    pub method: PoolingMethod,
    pub attention_input: AttentionInput,
}

impl Default for MilConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            method: PoolingMethod::Attention,
            attention_input: AttentionInput::Logits,
        }
    }
}

impl MilConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.hidden_dim == 0 {
            v.push("mil.hidden_dim must be positive".into());
        }
        v
    }
}

#[derive(Debug, Clone)]
pub struct MilHead {
    pub instance_conv: Conv2d,
    /// [L, N_c]
    pub w1: ParamId,
    /// [L]
    pub w2: ParamId,
    /// [L]
    pub b: ParamId,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub method: PoolingMethod,
    pub attention_input: AttentionInput,
}

/// Tape handles for one batch of bags.
#[derive(Debug, Clone, Copy)]
pub struct MilOutput {
    /// [N, N_c]
    pub p_bag: Var,
    /// [N, N_c, H', W']
    pub logits: Var,
    /// [N, N_c, H', W']
    pub instance_probs: Var,
    /// [N, H', W'], attention method only.
    pub attention: Option<Var>,
}

/// Plain-value prediction for a single bag.
#[derive(Debug, Clone, PartialEq)]
pub struct BagPrediction {
    pub p_bag: Vec<f64>,
    /// [N_c, H', W']
    pub instance_probs: Tensor,
    /// [H', W']
    pub attention_weights: Option<Tensor>,
}

impl BagPrediction {
    /// Most probable class; ties go to the lowest index.
    pub fn predicted_class(&self) -> usize {
        argmax(&self.p_bag)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl MilHead {
    pub fn new(store: &mut ParamStore, in_channels: usize, num_classes: usize, config: &MilConfig) -> Self {
        let l = config.hidden_dim;
        let instance_conv = Conv2d::new(store, "head.instance", in_channels, num_classes, 1, 1, 0);
        store.param_mut(instance_conv.weight).init_gain = SCORE_INIT_GAIN;
        Self {
            instance_conv,
            w1: store.add("head.attention.w1", ParamKind::Weight, &[l, num_classes], num_classes),
            w2: store.add("head.attention.w2", ParamKind::Weight, &[l], l),
            b: store.add("head.attention.b", ParamKind::Bias, &[l], num_classes),
            hidden_dim: l,
            num_classes,
            method: config.method,
            attention_input: config.attention_input,
        }
    }

    /// F [N, C, H', W'] → per-position class scores [N, N_c, H', W'].
    pub fn instance_logits(&self, fwd: &mut Forward, features: Var) -> Result<Var> {
        self.instance_conv.forward(fwd, features)
    }

    /// Softmax over the class axis at every position.
    pub fn instance_probs(&self, tape: &mut Tape, logits: Var) -> Result<Var> {
        tape.softmax(logits, 1)
    }

    /// Attention weights [N, H', W'] from the instance vectors `inputs`
    /// ([N, N_c, H', W']); the softmax runs jointly over all positions of a bag.
    pub fn attention_weights(&self, fwd: &mut Forward, inputs: Var) -> Result<Var> {
        let shape = fwd.tape.shape(inputs).to_vec();
        if shape.len() != 4 || shape[1] != self.num_classes {
            return Err(Error::ShapeMismatch {
                op: "attention_weights",
                lhs: shape,
                rhs: vec![self.hidden_dim, self.num_classes],
            });
        }
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let w1 = fwd.param(self.w1);
        let w2 = fwd.param(self.w2);
        let b = fwd.param(self.b);
        let tape = &mut fwd.tape;
        let inst = tape.to_instances(inputs)?;
        let w1t = tape.transpose(w1)?;
        let affine = tape.matmul(inst, w1t)?;
        let affine = tape.add(affine, b)?;
        let hidden = tape.tanh(affine)?;
        let w2col = tape.reshape(w2, &[self.hidden_dim, 1])?;
        let scores = tape.matmul(hidden, w2col)?;
        let scores = tape.reshape(scores, &[n, h * w])?;
        let weights = tape.softmax(scores, 1)?;
        tape.reshape(weights, &[n, h, w])
    }

    /// Folds instance probabilities [N, N_c, H', W'] into bag
    /// probabilities [N, N_c].
    pub fn pool(&self, tape: &mut Tape, probs: Var, weights: Option<Var>) -> Result<Var> {
        let shape = tape.shape(probs).to_vec();
        if shape.len() != 4 {
            return Err(Error::InvalidShape {
                op: "mil_pool",
                shape,
                reason: "expected [N, N_c, H, W]".into(),
            });
        }
        let (n, c, p) = (shape[0], shape[1], shape[2] * shape[3]);
        let inst = tape.to_instances(probs)?;
        let inst = tape.reshape(inst, &[n, p, c])?;
        match self.method {
            PoolingMethod::Attention => {
                let weights = weights.ok_or_else(|| {
                    Error::InvalidArgument("attention pooling needs attention weights".into())
                })?;
                let ws = tape.shape(weights).to_vec();
                if ws.iter().product::<usize>() != n * p || ws[0] != n {
                    return Err(Error::ShapeMismatch {
                        op: "mil_pool",
                        lhs: shape,
                        rhs: ws,
                    });
                }
                let flat = tape.reshape(weights, &[n, p])?;
                tape.weighted_sum(flat, inst)
            }
            PoolingMethod::Mean => tape.mean_axis(inst, 1),
            PoolingMethod::Max => {
                let m = tape.max_axis(inst, 1)?;
                tape.normalize_last(m)
            }
        }
    }

    pub fn forward(&self, fwd: &mut Forward, features: Var) -> Result<MilOutput> {
        let logits = self.instance_logits(fwd, features)?;
        let instance_probs = self.instance_probs(&mut fwd.tape, logits)?;
        let attention = match self.method {
            PoolingMethod::Attention => {
                let input = match self.attention_input {
                    AttentionInput::Logits => logits,
                    AttentionInput::Probs => instance_probs,
                };
                Some(self.attention_weights(fwd, input)?)
            }
            _ => None,
        };
        let p_bag = self.pool(&mut fwd.tape, instance_probs, attention)?;
        Ok(MilOutput {
            p_bag,
            logits,
            instance_probs,
            attention,
        })
    }
}

impl MilOutput {
    /// Copies the recorded values out as one prediction per bag.
    pub fn predictions(&self, tape: &Tape) -> Vec<BagPrediction> {
        let p_bag = tape.value(self.p_bag);
        let probs = tape.value(self.instance_probs);
        let n = p_bag.shape()[0];
        (0..n)
            .map(|i| BagPrediction {
                p_bag: p_bag.index_first(i).into_data(),
                instance_probs: probs.index_first(i),
                attention_weights: self.attention.map(|a| tape.value(a).index_first(i)),
            })
            .collect()
    }
}
