//! Parameterized layers and the dense-connectivity building blocks.

mod blocks;
mod context;
mod layers;
mod params;

pub use blocks::{DenseBlock, DenseLayer, TransitionLayer, BOTTLENECK_FACTOR, LAYERS_PER_BLOCK};
pub use context::{Forward, ForwardUpdates, Mode};
pub use layers::{composite, dropout, pool2d, BatchNorm2d, Conv2d, Linear};
pub use params::{Param, ParamId, ParamKind, ParamStore, BIAS_INIT, SCORE_INIT_GAIN};
