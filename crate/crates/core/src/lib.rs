pub mod autodiff;
pub mod data;
pub mod checkpoint;
pub mod dccnn;
pub mod error;
pub mod eval;
mod kernels;
pub mod mil;
pub mod model;
pub mod nn;
pub mod run;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use dccnn::{shape_plan, Dccnn, DccnnConfig, HeadKind, ShapePlan};
pub use error::{CheckpointError, Error, Result};
pub use kernels::PoolKind;
pub use mil::{BagPrediction, MilConfig, MilHead, PoolingMethod};
pub use model::{Network, NetworkOutput};
pub use run::RunConfig;
pub use tensor::Tensor;
