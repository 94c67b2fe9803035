use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Value every bias-like parameter starts from.
pub const BIAS_INIT: f64 = 0.001;

/// Init gain of layers whose outputs are class scores, so predictions start
/// close to uniform.
pub const SCORE_INIT_GAIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Only weights take the L2 penalty; biases and BN affine terms do not.
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub fan_in: usize,
    /// Multiplies the init standard deviation of weights.
    pub init_gain: f64,
    pub tensor: Tensor,
}

/// Flat, ordered collection of every tensor a network owns.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, shape: &[usize], fan_in: usize) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let tensor = Tensor::zeros(shape).with_requires_grad(kind.trainable());
        self.params.push(Param {
            name,
            kind,
            fan_in,
            init_gain: 1.0,
            tensor,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.trainable())
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Deterministic initialization: weights ~ N(0, gain²·2/fan_in), biases and BN
    /// shifts at [`BIAS_INIT`], BN scales at 1, running stats at (0, 1).
    pub fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.params {
            let data = p.tensor.data_mut();
            match p.kind {
                ParamKind::Weight => {
                    let std = p.init_gain * (2.0 / p.fan_in.max(1) as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("finite std");
                    data.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
                }
                ParamKind::Bias | ParamKind::Beta => data.fill(BIAS_INIT),
                ParamKind::Gamma | ParamKind::RunningVar => data.fill(1.0),
                ParamKind::RunningMean => data.fill(0.0),
            }
            p.tensor.zero_grad();
        }
    }
}
