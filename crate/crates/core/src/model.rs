use crate::autodiff::Var;
use crate::dccnn::{Dccnn, DccnnConfig, GapFcHead, HeadKind};
use crate::error::{Error, Result};
use crate::mil::{BagPrediction, MilConfig, MilHead};
use crate::nn::{Forward, Mode, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub enum Head {
    GapFc(GapFcHead),
    Mil(MilHead),
}

/// Backbone plus head, with every parameter in one store.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: DccnnConfig,
    pub mil: MilConfig,
    pub store: ParamStore,
    pub backbone: Dccnn,
    pub head: Head,
}

#[derive(Debug, Clone, Copy)]
pub struct NetworkOutput {
    pub features: Var,
    /// [N, N_c] bag (or image) class probabilities.
    pub p_bag: Var,
    pub instance_probs: Option<Var>,
    pub attention: Option<Var>,
}

impl Network {
    /// Builds the architecture and initializes it from `config.seed`.
    pub fn new(config: &DccnnConfig, mil: &MilConfig) -> Result<Self> {
        let mut net = Self::build(config, mil)?;
        net.init_params(config.seed);
        Ok(net)
    }

    /// Architecture only; every parameter is zero until [`Self::init_params`].
    pub fn build(config: &DccnnConfig, mil: &MilConfig) -> Result<Self> {
        let mut violations = config.violations();
        violations.extend(mil.violations());
        if !violations.is_empty() {
            return Err(Error::Config(violations));
        }
        let mut store = ParamStore::new();
        let backbone = Dccnn::new(&mut store, config)?;
        let channels = config.feature_channels();
        let head = match config.head {
            HeadKind::GapFc => Head::GapFc(GapFcHead::new(&mut store, channels, config.num_classes)),
            HeadKind::Mil => Head::Mil(MilHead::new(&mut store, channels, config.num_classes, mil)),
        };
        Ok(Self {
            config: config.clone(),
            mil: mil.clone(),
            store,
            backbone,
            head,
        })
    }

    pub fn init_params(&mut self, seed: u64) {
        self.store.initialize(seed);
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn mil_head(&self) -> Option<&MilHead> {
        match &self.head {
            Head::Mil(h) => Some(h),
            Head::GapFc(_) => None,
        }
    }

    /// Layers with weights: backbone convs plus the head's classifier.
    pub fn weighted_layer_count(&self) -> usize {
        self.backbone.conv_layer_count() + 1
    }

    /// Features, then dropout, then the head.
    pub fn forward(&self, fwd: &mut Forward, x: Var) -> Result<NetworkOutput> {
        let features = self.backbone.forward_features(fwd, x)?;
        let dropped = fwd.dropout(features)?;
        match &self.head {
            Head::GapFc(head) => Ok(NetworkOutput {
                features,
                p_bag: head.forward(fwd, dropped)?,
                instance_probs: None,
                attention: None,
            }),
            Head::Mil(head) => {
                let out = head.forward(fwd, dropped)?;
                Ok(NetworkOutput {
                    features,
                    p_bag: out.p_bag,
                    instance_probs: Some(out.instance_probs),
                    attention: out.attention,
                })
            }
        }
    }

    /// Eval-mode predictions for a batch [N, 3, S, S].
    pub fn predict(&self, images: &Tensor) -> Result<Vec<BagPrediction>> {
        let mut fwd = Forward::new(&self.store, Mode::Eval);
        let x = fwd.input(images.clone());
        let out = self.forward(&mut fwd, x)?;
        let tape = &fwd.tape;
        let p_bag = tape.value(out.p_bag);
        Ok((0..p_bag.shape()[0])
            .map(|i| BagPrediction {
                p_bag: p_bag.index_first(i).into_data(),
                instance_probs: out
                    .instance_probs
                    .map(|v| tape.value(v).index_first(i))
                    .unwrap_or_else(|| Tensor::from_parts(vec![p_bag.shape()[1], 1, 1], p_bag.index_first(i).into_data())),
                attention_weights: out.attention.map(|a| tape.value(a).index_first(i)),
            })
            .collect())
    }
}
