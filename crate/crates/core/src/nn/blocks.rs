use super::context::Forward;
use super::layers::{composite, BatchNorm2d, Conv2d};
use super::params::ParamStore;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::kernels::PoolKind;

/// Bottleneck width of each dense layer, as a multiple of the growth rate.
pub const BOTTLENECK_FACTOR: usize = 4;

/// Number of composite layer pairs per dense block.
pub const LAYERS_PER_BLOCK: usize = 3;

/// 1×1 bottleneck then 3×3 conv, each behind its own BN + ReLU.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub norm1: Option<BatchNorm2d>,
    pub bottleneck: Conv2d,
    pub norm2: Option<BatchNorm2d>,
    pub conv: Conv2d,
}

impl DenseLayer {
    fn new(store: &mut ParamStore, name: &str, in_ch: usize, growth: usize, batch_norm: bool) -> Self {
        let width = BOTTLENECK_FACTOR * growth;
        Self {
            norm1: batch_norm.then(|| BatchNorm2d::new(store, &format!("{name}.norm1"), in_ch)),
            bottleneck: Conv2d::new(store, &format!("{name}.conv1"), in_ch, width, 1, 1, 0),
            norm2: batch_norm.then(|| BatchNorm2d::new(store, &format!("{name}.norm2"), width)),
            conv: Conv2d::new(store, &format!("{name}.conv2"), width, growth, 3, 1, 1),
        }
    }

    pub fn forward(&self, fwd: &mut Forward, x: Var) -> Result<Var> {
        let h = composite(fwd, self.norm1.as_ref(), &self.bottleneck, x)?;
        composite(fwd, self.norm2.as_ref(), &self.conv, h)
    }
}

#[derive(Debug, Clone)]
pub struct DenseBlock {
    pub layers: Vec<DenseLayer>,
    pub in_ch: usize,
    pub growth: usize,
}

impl DenseBlock {
    pub fn new(store: &mut ParamStore, name: &str, in_ch: usize, growth: usize, batch_norm: bool) -> Self {
        let layers = (0..LAYERS_PER_BLOCK)
            .map(|l| {
                DenseLayer::new(
                    store,
                    &format!("{name}.layer{}", l + 1),
                    in_ch + l * growth,
                    growth,
                    batch_norm,
                )
            })
            .collect();
        Self {
            layers,
            in_ch,
            growth,
        }
    }

    pub fn out_ch(&self) -> usize {
        self.in_ch + self.layers.len() * self.growth
    }

    /// Each layer sees the concatenation of the block input and every earlier
    /// layer output; the block returns the concatenation of all of them.
    pub fn forward(&self, fwd: &mut Forward, x: Var) -> Result<Var> {
        let ch = fwd.tape.shape(x).get(1).copied();
        if ch != Some(self.in_ch) {
            return Err(Error::ShapeMismatch {
                op: "dense_block",
                lhs: fwd.tape.shape(x).to_vec(),
                rhs: vec![self.in_ch],
            });
        }
        let mut features = vec![x];
        for layer in &self.layers {
            let input = fwd.tape.concat_channels(&features)?;
            let y = layer.forward(fwd, input)?;
            features.push(y);
        }
        fwd.tape.concat_channels(&features)
    }
}

/// BN + ReLU + channel-preserving 1×1 conv, then 2×2 stride-2 average pool.
#[derive(Debug, Clone)]
pub struct TransitionLayer {
    pub norm: Option<BatchNorm2d>,
    pub conv: Conv2d,
}

impl TransitionLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, batch_norm: bool) -> Self {
        Self {
            norm: batch_norm.then(|| BatchNorm2d::new(store, &format!("{name}.norm"), channels)),
            conv: Conv2d::new(store, &format!("{name}.conv"), channels, channels, 1, 1, 0),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv.out_ch
    }

    pub fn forward(&self, fwd: &mut Forward, x: Var) -> Result<Var> {
        let shape = fwd.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.conv.in_ch {
            return Err(Error::ShapeMismatch {
                op: "transition",
                lhs: shape,
                rhs: vec![self.conv.in_ch],
            });
        }
        if !shape[2].is_multiple_of(2) || !shape[3].is_multiple_of(2) {
            return Err(Error::InvalidShape {
                op: "transition",
                shape,
                reason: "2x2 stride-2 pooling needs even spatial dims".into(),
            });
        }
        let y = composite(fwd, self.norm.as_ref(), &self.conv, x)?;
        fwd.tape.pool2d(PoolKind::Avg, y, 2, 2, 0)
    }
}
