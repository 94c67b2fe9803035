//! The 23-layer dense connected backbone.
//!
//! Layout: 7×7/2 conv stem with BN+ReLU and a 3×3/2 max pool, three
//! (dense block → channel-preserving transition) stages, then BN+ReLU and a
//! 1×1 refine conv producing the feature map F at 1/32 of the input size.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::kernels::PoolKind;
use crate::nn::{
    composite, BatchNorm2d, Conv2d, DenseBlock, Forward, Linear, ParamStore, TransitionLayer, LAYERS_PER_BLOCK,
    SCORE_INIT_GAIN,
};

/// Fixed number of dense layers in each of the three blocks.
pub const BLOCK_LENGTHS: [usize; 3] = [LAYERS_PER_BLOCK; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Global average pool, fully connected layer, softmax.
    GapFc,
    /// Instance classifier with MIL pooling.
    Mil,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DccnnConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub init_channels: usize,
    pub growth_rate: usize,
    pub block_lengths: Vec<usize>,
    /// Output channels of the refine conv; `None` keeps the incoming count.
    pub refine_channels: Option<usize>,
    pub num_classes: usize,
    pub head: HeadKind,
    /// Disabling BN is only meant for debugging.
    pub batch_norm: bool,
    pub seed: u64,
}

impl Default for DccnnConfig {
    fn default() -> Self {
        Self {
            input_size: 224,
            in_channels: 3,
            init_channels: 64,
            growth_rate: 32,
            block_lengths: BLOCK_LENGTHS.to_vec(),
            refine_channels: None,
            num_classes: 21,
            head: HeadKind::Mil,
            batch_norm: true,
            seed: 0,
        }
    }
}

impl DccnnConfig {
    /// Reduced size for CPU experiments: 96 px input, c0 = 16, k = 8.
    pub fn desk(num_classes: usize) -> Self {
        Self {
            input_size: 96,
            init_channels: 16,
            growth_rate: 8,
            num_classes,
            ..Self::default()
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            v.push(format!("input_size {} must be a positive multiple of 32", self.input_size));
        }
        if self.in_channels == 0 {
            v.push("in_channels must be positive".into());
        }
        if self.init_channels == 0 {
            v.push("init_channels must be positive".into());
        }
        if self.growth_rate == 0 {
            v.push("growth_rate must be positive".into());
        }
        if self.block_lengths != BLOCK_LENGTHS {
            v.push(format!("block_lengths must be {:?}, got {:?}", BLOCK_LENGTHS, self.block_lengths));
        }
        if self.refine_channels == Some(0) {
            v.push("refine_channels must be positive".into());
        }
        if self.num_classes < 2 {
            v.push(format!("num_classes {} must be at least 2", self.num_classes));
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

    /// Channels leaving the third transition (entering the refine conv).
    pub fn backbone_channels(&self) -> usize {
        self.init_channels + self.block_lengths.iter().sum::<usize>() * self.growth_rate
    }

    pub fn feature_channels(&self) -> usize {
        self.refine_channels.unwrap_or_else(|| self.backbone_channels())
    }

    pub fn feature_size(&self) -> usize {
        self.input_size / 32
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Output shape of every stage, derived from the config alone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapePlan {
    pub stages: Vec<Stage>,
}

impl ShapePlan {
    pub fn stage(&self, name: &str) -> Option<&Stage> {
        self.stages.iter().find(|s| s.name == name)
    }
}

pub fn shape_plan(config: &DccnnConfig) -> Result<ShapePlan> {
    config.validate()?;
    let mut stages = Vec::new();
    let mut push = |name: String, channels: usize, size: usize| {
        stages.push(Stage {
            name,
            channels,
            height: size,
            width: size,
        })
    };
    let mut size = config.input_size / 2;
    let mut ch = config.init_channels;
    push("conv".into(), ch, size);
    size /= 2;
    push("pool".into(), ch, size);
    for (i, len) in config.block_lengths.iter().enumerate() {
        ch += len * config.growth_rate;
        push(format!("dense_block_{}", i + 1), ch, size);
        size /= 2;
        push(format!("transition_{}", i + 1), ch, size);
    }
    push("refine".into(), config.feature_channels(), size);
    if config.head == HeadKind::GapFc {
        push("global_avg_pool".into(), config.feature_channels(), 1);
        push("fc".into(), config.num_classes, 1);
    }
    Ok(ShapePlan { stages })
}

#[derive(Debug, Clone)]
pub struct Dccnn {
    pub config: DccnnConfig,
    pub stem_conv: Conv2d,
    pub stem_norm: Option<BatchNorm2d>,
    pub blocks: Vec<DenseBlock>,
    pub transitions: Vec<TransitionLayer>,
    pub final_norm: Option<BatchNorm2d>,
    pub refine: Conv2d,
}

/// Per-stage tensors recorded by [`Dccnn::forward_stages`].
pub type StageOutputs = Vec<(String, Var)>;

impl Dccnn {
    /// Registers every backbone parameter in `store` (uninitialized).
    pub fn new(store: &mut ParamStore, config: &DccnnConfig) -> Result<Self> {
        config.validate()?;
        let bn = config.batch_norm;
        let c0 = config.init_channels;
        let stem_conv = Conv2d::new(store, "stem.conv", config.in_channels, c0, 7, 2, 3);
        let stem_norm = bn.then(|| BatchNorm2d::new(store, "stem.norm", c0));
        let mut ch = c0;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for i in 0..config.block_lengths.len() {
            let block = DenseBlock::new(store, &format!("block{}", i + 1), ch, config.growth_rate, bn);
            ch = block.out_ch();
            blocks.push(block);
            transitions.push(TransitionLayer::new(store, &format!("transition{}", i + 1), ch, bn));
        }
        let final_norm = bn.then(|| BatchNorm2d::new(store, "refine.norm", ch));
        let refine = Conv2d::new(store, "refine.conv", ch, config.feature_channels(), 1, 1, 0);
        Ok(Self {
            config: config.clone(),
            stem_conv,
            stem_norm,
            blocks,
            transitions,
            final_norm,
            refine,
        })
    }

    /// Convolution layers with weights: stem, two per dense layer, one per
    /// transition, and the refine conv.
    pub fn conv_layer_count(&self) -> usize {
        1 + self.blocks.iter().map(|b| 2 * b.layers.len()).sum::<usize>() + self.transitions.len() + 1
    }

    pub fn forward_features(&self, fwd: &mut Forward, x: Var) -> Result<Var> {
        let stages = self.forward_stages(fwd, x)?;
        Ok(stages.last().expect("refine stage").1)
    }

    /// Runs the backbone and returns the output of every stage in
    /// [`ShapePlan`] order (up to and including `refine`).
    pub fn forward_stages(&self, fwd: &mut Forward, x: Var) -> Result<StageOutputs> {
        let shape = fwd.tape.shape(x).to_vec();
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != self.config.in_channels || shape[2] != s || shape[3] != s {
            return Err(Error::ShapeMismatch {
                op: "dccnn",
                lhs: shape,
                rhs: vec![self.config.in_channels, s, s],
            });
        }
        let mut out = Vec::new();
        let mut h = self.stem_conv.forward(fwd, x)?;
        out.push(("conv".to_string(), h));
        if let Some(bn) = &self.stem_norm {
            h = bn.forward(fwd, h)?;
        }
        h = fwd.tape.relu(h)?;
        h = fwd.tape.pool2d(PoolKind::Max, h, 3, 2, 1)?;
        out.push(("pool".to_string(), h));
        for (i, (block, transition)) in self.blocks.iter().zip(&self.transitions).enumerate() {
            h = block.forward(fwd, h)?;
            out.push((format!("dense_block_{}", i + 1), h));
            h = transition.forward(fwd, h)?;
            h = fwd.dropout(h)?;
            out.push((format!("transition_{}", i + 1), h));
        }
        h = composite(fwd, self.final_norm.as_ref(), &self.refine, h)?;
        out.push(("refine".to_string(), h));
        Ok(out)
    }
}

/// Standalone classification head: global average pool, linear, softmax.
#[derive(Debug, Clone)]
pub struct GapFcHead {
    pub fc: Linear,
}

impl GapFcHead {
    pub fn new(store: &mut ParamStore, channels: usize, num_classes: usize) -> Self {
        let fc = Linear::new(store, "head.fc", channels, num_classes);
        store.param_mut(fc.weight).init_gain = SCORE_INIT_GAIN;
        Self { fc }
    }

    /// F [N, C, H, W] → class probabilities [N, N_c].
    pub fn forward(&self, fwd: &mut Forward, features: Var) -> Result<Var> {
        let pooled = fwd.tape.global_avg_pool(features)?;
        let logits = self.fc.forward(fwd, pooled)?;
        fwd.tape.softmax(logits, 1)
    }
}
