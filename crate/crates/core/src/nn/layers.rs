use rand::Rng;

use super::context::{Forward, Mode};
use super::params::{ParamId, ParamKind, ParamStore};
use crate::autodiff::{batch_moments, BnStats, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, PoolKind};

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            &[out_ch, in_ch, kernel, kernel],
            fan_in,
        );
        let bias = store.add(format!("{name}.bias"), ParamKind::Bias, &[out_ch], fan_in);
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        }
    }

    pub fn out_size(&self, size: usize) -> Option<usize> {
        kernels::window_out(size, self.kernel, self.stride, self.padding)
    }

    pub fn forward(&self, fwd: &mut Forward, x: Var) -> Result<Var> {
        let shape = fwd.tape.shape(x);
        if shape.len() != 4 || shape[1] != self.in_ch {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: shape.to_vec(),
                rhs: vec![self.out_ch, self.in_ch, self.kernel, self.kernel],
            });
        }
        let w = fwd.param(self.weight);
        let b = fwd.param(self.bias);
        fwd.tape.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), ParamKind::Gamma, &[channels], 1),
            beta: store.add(format!("{name}.beta"), ParamKind::Beta, &[channels], 1),
            running_mean: store.add(format!("{name}.running_mean"), ParamKind::RunningMean, &[channels], 1),
            running_var: store.add(format!("{name}.running_var"), ParamKind::RunningVar, &[channels], 1),
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// Train mode normalizes with batch statistics and queues a running-stat
    /// update (unbiased variance); eval mode uses the running statistics.
    pub fn forward(&self, fwd: &mut Forward, x: Var) -> Result<Var> {
        let shape = fwd.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: shape,
                rhs: vec![self.channels],
            });
        }
        let stats = match fwd.mode() {
            Mode::Train => {
                let (mean, var) = batch_moments(fwd.tape.value(x));
                let count = (shape[0] * shape[2] * shape[3]) as f64;
                let correction = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let m = self.momentum;
                let store = fwd.store();
                let rm = store.tensor(self.running_mean).data();
                let rv = store.tensor(self.running_var).data();
                let new_mean = rm.iter().zip(&mean).map(|(r, b)| (1.0 - m) * r + m * b).collect();
                let new_var = rv
                    .iter()
                    .zip(&var)
                    .map(|(r, b)| (1.0 - m) * r + m * b * correction)
                    .collect();
                fwd.record_buffer(self.running_mean, new_mean);
                fwd.record_buffer(self.running_var, new_var);
                BnStats::Batch
            }
            Mode::Eval => BnStats::Running {
                mean: fwd.store().tensor(self.running_mean).data().to_vec(),
                var: fwd.store().tensor(self.running_var).data().to_vec(),
            },
        };
        let gamma = fwd.param(self.gamma);
        let beta = fwd.param(self.beta);
        fwd.tape.batch_norm(x, gamma, beta, self.eps, stats)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_features: usize, out_features: usize) -> Self {
        Self {
            weight: store.add(
                format!("{name}.weight"),
                ParamKind::Weight,
                &[out_features, in_features],
                in_features,
            ),
            bias: store.add(format!("{name}.bias"), ParamKind::Bias, &[out_features], in_features),
            in_features,
            out_features,
        }
    }

    /// [N, in] → [N, out].
    pub fn forward(&self, fwd: &mut Forward, x: Var) -> Result<Var> {
        let shape = fwd.tape.shape(x);
        if shape.len() != 2 || shape[1] != self.in_features {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: shape.to_vec(),
                rhs: vec![self.out_features, self.in_features],
            });
        }
        let w = fwd.param(self.weight);
        let b = fwd.param(self.bias);
        let wt = fwd.tape.transpose(w)?;
        let y = fwd.tape.matmul(x, wt)?;
        fwd.tape.add(y, b)
    }
}

pub fn pool2d(tape: &mut Tape, kind: PoolKind, x: Var, k: usize, stride: usize, padding: usize) -> Result<Var> {
    tape.pool2d(kind, x, k, stride, padding)
}

/// Inverted dropout: identity in eval mode or at rate 0; otherwise each
/// element is zeroed with probability `rate` and survivors scaled by
/// 1/(1 − rate).
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, mode: Mode, rng: &mut impl Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mask = (0..tape.value(x).numel())
        .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
        .collect();
    tape.dropout_mask(x, mask)
}

/// `conv(relu(bn(x)))`, the composite function used throughout the
/// dense blocks and transitions. `bn` may be disabled.
pub fn composite(fwd: &mut Forward, bn: Option<&BatchNorm2d>, conv: &Conv2d, x: Var) -> Result<Var> {
    let normed = match bn {
        Some(bn) => bn.forward(fwd, x)?,
        None => x,
    };
    let act = fwd.tape.relu(normed)?;
    conv.forward(fwd, act)
}
