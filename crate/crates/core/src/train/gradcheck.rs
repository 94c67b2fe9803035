use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dccnn::DccnnConfig;
use crate::error::{Error, Result};
use crate::mil::MilConfig;
use crate::model::Network;
use crate::nn::{Forward, Mode, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    /// Coordinates to probe; every selected tensor gets at least one.
    pub coordinates: usize,
    pub h: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
    /// Only parameters whose name starts with this prefix.
    pub prefix: Option<String>,
    /// Batch-statistics normalization instead of running statistics.
    pub train_mode: bool,
    #[doc(hidden)]
    pub fault: Option<&'static str>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            coordinates: 256,
            h: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            seed: 0,
            prefix: None,
            train_mode: false,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub tensors: usize,
    pub worst: Option<CoordinateCheck>,
    pub failures: Vec<CoordinateCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

fn loss_of(net: &Network, store: &ParamStore, mode: Mode, input: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut fwd = Forward::new(store, mode);
    let x = fwd.input(input.clone());
    let out = net.forward(&mut fwd, x)?;
    let loss = fwd.tape.bag_nll(out.p_bag, labels)?;
    Ok(fwd.tape.value(loss).data()[0])
}

/// Compares backpropagated gradients of the bag loss with central finite
/// differences. Dropout is always off so the forward pass is a deterministic
/// function of the parameters; normalization runs in eval mode unless
/// `train_mode` is set.
pub fn gradcheck(net: &Network, input: &Tensor, labels: &[usize], options: &GradcheckOptions) -> Result<GradcheckReport> {
    let selected: Vec<ParamId> = net
        .store
        .iter()
        .filter(|(_, p)| p.kind.trainable())
        .filter(|(_, p)| options.prefix.as_deref().is_none_or(|pre| p.name.starts_with(pre)))
        .map(|(id, _)| id)
        .collect();
    if selected.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no trainable parameter matches prefix {:?}",
            options.prefix
        )));
    }

    let mode = if options.train_mode { Mode::Train } else { Mode::Eval };
    let mut fwd = Forward::new(&net.store, mode);
    if let Some(op) = options.fault {
        fwd.tape.inject_backward_fault(op);
    }
    let x = fwd.input(input.clone());
    let out = net.forward(&mut fwd, x)?;
    let loss = fwd.tape.bag_nll(out.p_bag, labels)?;
    fwd.backward(loss)?;
    let (updates, _) = fwd.into_updates();
    let analytic = |id: ParamId, i: usize| {
        updates
            .grads
            .iter()
            .find(|(g, _)| *g == id)
            .map_or(0.0, |(_, g)| g[i])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut coords = BTreeSet::new();
    for &id in &selected {
        coords.insert((id.index(), rng.gen_range(0..net.store.tensor(id).numel())));
    }
    let total: usize = selected.iter().map(|&id| net.store.tensor(id).numel()).sum();
    let target = options.coordinates.min(total);
    while coords.len() < target {
        let id = selected[rng.gen_range(0..selected.len())];
        coords.insert((id.index(), rng.gen_range(0..net.store.tensor(id).numel())));
    }

    let mut store = net.store.clone();
    let mut checks = Vec::with_capacity(coords.len());
    for (p, i) in coords {
        let id = selected.iter().copied().find(|id| id.index() == p).expect("selected id");
        let orig = store.tensor(id).data()[i];
        store.tensor_mut(id).data_mut()[i] = orig + options.h;
        let up = loss_of(net, &store, mode, input, labels)?;
        store.tensor_mut(id).data_mut()[i] = orig - options.h;
        let down = loss_of(net, &store, mode, input, labels)?;
        store.tensor_mut(id).data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * options.h);
        let a = analytic(id, i);
        let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(options.floor);
        checks.push(CoordinateCheck {
            param: store.param(id).name.clone(),
            index: i,
            analytic: a,
            numeric,
            rel_err,
        });
    }
    let worst = checks.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)).cloned();
    Ok(GradcheckReport {
        max_rel_err: worst.as_ref().map_or(0.0, |w| w.rel_err),
        tolerance: options.tolerance,
        checked: checks.len(),
        tensors: selected.len(),
        failures: checks.iter().filter(|c| !(c.rel_err < options.tolerance)).cloned().collect(),
        worst,
    })
}

/// The small model used for end-to-end gradient checks: 64 px input,
/// c0 = 8, k = 4, L = 8, three classes.
pub fn gradcheck_profile() -> (DccnnConfig, MilConfig) {
    let dccnn = DccnnConfig {
        input_size: 64,
        init_channels: 8,
        growth_rate: 4,
        num_classes: 3,
        ..DccnnConfig::default()
    };
    let mil = MilConfig {
        hidden_dim: 8,
        ..MilConfig::default()
    };
    (dccnn, mil)
}

/// [`gradcheck_profile`] network with unit init gain on every weight. With
/// the damped score layers the instance predictions start almost uniform and
/// the attention gradients all but vanish, which leaves finite differences
/// with nothing to measure.
pub fn gradcheck_network(seed: u64) -> Result<Network> {
    let (dccnn, mil) = gradcheck_profile();
    let mut net = Network::build(&dccnn, &mil)?;
    let ids: Vec<_> = net.store.ids().collect();
    for id in ids {
        net.store.param_mut(id).init_gain = 1.0;
    }
    net.init_params(seed);
    Ok(net)
}
