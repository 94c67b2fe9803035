//! Forward and backward rules for every recorded operation.
//!
//! `forward` is a pure function of the op and its input values, which is what
//! lets a tape be replayed bit-for-bit.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, PoolGeom, PoolKind};
use crate::tensor::Tensor;

/// Floor applied before taking logarithms of probabilities.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum BnStats {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with fixed statistics (eval mode).
    Running { mean: Vec<f64>, var: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Relu,
    Tanh,
    Exp,
    Log { clamp: bool },
    Scale(f64),
    MatMul,
    Transpose,
    Softmax { axis: usize },
    ConcatChannels,
    SliceChannels { start: usize, len: usize },
    Conv2d { stride: usize, padding: usize },
    Pool2d {
        kind: PoolKind,
        k: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm { eps: f64, stats: BnStats },
    /// Multiplies by a fixed mask that already carries the 1/(1-rate) scale.
    Dropout { mask: Vec<f64> },
    GlobalAvgPool,
    Reshape { shape: Vec<usize> },
    /// [N, C, H, W] → [N·H·W, C], rows ordered (n, i, j).
    ToInstances,
    SumAll,
    MeanAll,
    SumAxis { axis: usize },
    MeanAxis { axis: usize },
    MaxAxis { axis: usize },
    /// Divides every row of the last axis by its sum.
    NormalizeLast,
    /// weights [N, P] · values [N, P, C] → [N, C].
    WeightedSum,
    /// Mean over the batch of −log(max(p[n, label_n], LOG_FLOOR)).
    BagNll { labels: Vec<usize> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Log { .. } => "log",
            Op::Scale(_) => "scale",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Softmax { .. } => "softmax",
            Op::ConcatChannels => "concat_channels",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Conv2d { .. } => "conv2d",
            Op::Pool2d { .. } => "pool2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Dropout { .. } => "dropout",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Reshape { .. } => "reshape",
            Op::ToInstances => "to_instances",
            Op::SumAll => "sum_all",
            Op::MeanAll => "mean_all",
            Op::SumAxis { .. } => "sum_axis",
            Op::MeanAxis { .. } => "mean_axis",
            Op::MaxAxis { .. } => "max_axis",
            Op::NormalizeLast => "normalize_last",
            Op::WeightedSum => "weighted_sum",
            Op::BagNll { .. } => "bag_nll",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub(crate) enum Saved {
    #[default]
    None,
    Indices(Vec<usize>),
    Bn { mean: Vec<f64>, inv_std: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rank-1 operand indexed by the channel axis of the other.
    Channel { axis: usize },
    Scalar,
}

fn channel_axis(rank: usize) -> usize {
    if rank >= 2 {
        1
    } else {
        0
    }
}

fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        return Ok(Broadcast::Same);
    }
    if b.shape() == [1] {
        return Ok(Broadcast::Scalar);
    }
    let axis = channel_axis(a.rank());
    if b.rank() == 1 && b.shape()[0] == a.shape()[axis] {
        return Ok(Broadcast::Channel { axis });
    }
    Err(Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })
}

/// (outer, len, inner) split of a shape around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn b_index(kind: Broadcast, shape: &[usize], i: usize) -> usize {
    match kind {
        Broadcast::Same => i,
        Broadcast::Scalar => 0,
        Broadcast::Channel { axis } => {
            let inner: usize = shape[axis + 1..].iter().product();
            (i / inner) % shape[axis]
        }
    }
}

fn expect_arity(op: &Op, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{}: expected {n} inputs, got {}",
            op.name(),
            inputs.len()
        )));
    }
    Ok(())
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            reason: format!("expected rank {rank}"),
        });
    }
    Ok(())
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(Error::InvalidAxis {
            op,
            axis,
            rank: t.rank(),
        });
    }
    Ok(())
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

pub(crate) fn conv_geom(op: &'static str, x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<ConvGeom> {
    expect_rank(op, x, 4)?;
    expect_rank(op, w, 4)?;
    let (xs, ws) = (x.shape(), w.shape());
    if xs[1] != ws[1] {
        return Err(Error::ShapeMismatch {
            op,
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    let degenerate = || Error::InvalidShape {
        op,
        shape: xs.to_vec(),
        reason: format!(
            "kernel {}x{} stride {stride} padding {padding} gives an empty output",
            ws[2], ws[3]
        ),
    };
    let out_h = kernels::window_out(xs[2], ws[2], stride, padding).ok_or_else(degenerate)?;
    let out_w = kernels::window_out(xs[3], ws[3], stride, padding).ok_or_else(degenerate)?;
    Ok(ConvGeom {
        in_ch: xs[1],
        h: xs[2],
        w: xs[3],
        out_ch: ws[0],
        kh: ws[2],
        kw: ws[3],
        stride,
        padding,
        out_h,
        out_w,
    })
}

pub(crate) fn pool_geom(x: &Tensor, k: usize, stride: usize, padding: usize) -> Result<PoolGeom> {
    expect_rank("pool2d", x, 4)?;
    let s = x.shape();
    let degenerate = || Error::InvalidShape {
        op: "pool2d",
        shape: s.to_vec(),
        reason: format!("window {k} stride {stride} padding {padding} gives an empty output"),
    };
    if padding * 2 > k {
        return Err(Error::InvalidShape {
            op: "pool2d",
            shape: s.to_vec(),
            reason: format!("padding {padding} exceeds half the window {k}"),
        });
    }
    let out_h = kernels::window_out(s[2], k, stride, padding).ok_or_else(degenerate)?;
    let out_w = kernels::window_out(s[3], k, stride, padding).ok_or_else(degenerate)?;
    Ok(PoolGeom {
        planes: s[0] * s[1],
        h: s[2],
        w: s[3],
        k,
        stride,
        padding,
        out_h,
        out_w,
    })
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

pub(crate) fn forward(op: &Op, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
    let plain = |t: Tensor| Ok((t, Saved::None));
    match op {
        Op::Leaf => Err(Error::InvalidArgument("leaf has no forward rule".into())),
        Op::Add | Op::Sub | Op::Mul => {
            expect_arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let kind = broadcast_kind(op.name(), a, b)?;
            let bd = b.data();
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add => |x, y| x + y,
                Op::Sub => |x, y| x - y,
                _ => |x, y| x * y,
            };
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[b_index(kind, a.shape(), i)]))
                .collect();
            plain(Tensor::from_parts(a.shape().to_vec(), data))
        }
        Op::Relu => {
            expect_arity(op, inputs, 1)?;
            plain(unary(inputs[0], |v| if v > 0.0 { v } else { 0.0 }))
        }
        Op::Tanh => {
            expect_arity(op, inputs, 1)?;
            plain(unary(inputs[0], f64::tanh))
        }
        Op::Exp => {
            expect_arity(op, inputs, 1)?;
            plain(unary(inputs[0], f64::exp))
        }
        Op::Log { clamp } => {
            expect_arity(op, inputs, 1)?;
            let x = inputs[0];
            if !clamp {
                if let Some((index, &value)) =
                    x.data().iter().enumerate().find(|(_, &v)| !(v > 0.0))
                {
                    return Err(Error::NonPositiveLog { index, value });
                }
            }
            plain(unary(x, |v| v.max(LOG_FLOOR).ln()))
        }
        Op::Scale(s) => {
            expect_arity(op, inputs, 1)?;
            let s = *s;
            plain(unary(inputs[0], |v| v * s))
        }
        Op::MatMul => {
            expect_arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            expect_rank("matmul", a, 2)?;
            expect_rank("matmul", b, 2)?;
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if b.shape()[0] != k {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let mut c = vec![0.0; m * n];
            kernels::gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut c);
            plain(Tensor::from_parts(vec![m, n], c))
        }
        Op::Transpose => {
            expect_arity(op, inputs, 1)?;
            let a = inputs[0];
            expect_rank("transpose", a, 2)?;
            plain(transpose(a))
        }
        Op::Softmax { axis } => {
            expect_arity(op, inputs, 1)?;
            let x = inputs[0];
            check_axis("softmax", x, *axis)?;
            plain(softmax(x, *axis))
        }
        Op::ConcatChannels => {
            let first = inputs.first().ok_or_else(|| {
                Error::InvalidArgument("concat_channels: need at least one tensor".into())
            })?;
            expect_rank("concat_channels", first, 4)?;
            let s0 = first.shape();
            for t in inputs {
                expect_rank("concat_channels", t, 4)?;
                let s = t.shape();
                if s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3] {
                    return Err(Error::ShapeMismatch {
                        op: "concat_channels",
                        lhs: s0.to_vec(),
                        rhs: s.to_vec(),
                    });
                }
            }
            let (n, plane) = (s0[0], s0[2] * s0[3]);
            let total: usize = inputs.iter().map(|t| t.shape()[1]).sum();
            let mut data = Vec::with_capacity(n * total * plane);
            for b in 0..n {
                for t in inputs {
                    let len = t.shape()[1] * plane;
                    data.extend_from_slice(&t.data()[b * len..(b + 1) * len]);
                }
            }
            plain(Tensor::from_parts(vec![n, total, s0[2], s0[3]], data))
        }
        Op::SliceChannels { start, len } => {
            expect_arity(op, inputs, 1)?;
            let x = inputs[0];
            expect_rank("slice_channels", x, 4)?;
            let s = x.shape();
            if *len == 0 || start + len > s[1] {
                return Err(Error::InvalidShape {
                    op: "slice_channels",
                    shape: s.to_vec(),
                    reason: format!("channel range {start}..{} out of bounds", start + len),
                });
            }
            let plane = s[2] * s[3];
            let mut data = Vec::with_capacity(s[0] * len * plane);
            for b in 0..s[0] {
                let off = (b * s[1] + start) * plane;
                data.extend_from_slice(&x.data()[off..off + len * plane]);
            }
            plain(Tensor::from_parts(vec![s[0], *len, s[2], s[3]], data))
        }
        Op::Conv2d { stride, padding } => {
            if inputs.len() != 2 && inputs.len() != 3 {
                return Err(Error::InvalidArgument(format!(
                    "conv2d: expected 2 or 3 inputs, got {}",
                    inputs.len()
                )));
            }
            let (x, w) = (inputs[0], inputs[1]);
            let g = conv_geom("conv2d", x, w, *stride, *padding)?;
            let bias = inputs.get(2).map(|b| b.data());
            if let Some(b) = inputs.get(2) {
                if b.shape() != [g.out_ch] {
                    return Err(Error::ShapeMismatch {
                        op: "conv2d bias",
                        lhs: w.shape().to_vec(),
                        rhs: b.shape().to_vec(),
                    });
                }
            }
            let n = x.shape()[0];
            let out = kernels::conv2d_forward(x.data(), n, w.data(), bias, &g);
            plain(Tensor::from_parts(vec![n, g.out_ch, g.out_h, g.out_w], out))
        }
        Op::Pool2d {
            kind,
            k,
            stride,
            padding,
        } => {
            expect_arity(op, inputs, 1)?;
            let x = inputs[0];
            let g = pool_geom(x, *k, *stride, *padding)?;
            let (out, argmax) = kernels::pool2d_forward(x.data(), *kind, &g);
            let s = x.shape();
            let t = Tensor::from_parts(vec![s[0], s[1], g.out_h, g.out_w], out);
            Ok((t, Saved::Indices(argmax)))
        }
        Op::BatchNorm { eps, stats } => {
            expect_arity(op, inputs, 3)?;
            let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
            expect_rank("batch_norm", x, 4)?;
            let c = x.shape()[1];
            for p in [gamma, beta] {
                if p.shape() != [c] {
                    return Err(Error::ShapeMismatch {
                        op: "batch_norm",
                        lhs: x.shape().to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                }
            }
            let (mean, var) = match stats {
                BnStats::Batch => batch_moments(x),
                BnStats::Running { mean, var } => {
                    if mean.len() != c || var.len() != c {
                        return Err(Error::InvalidArgument(format!(
                            "batch_norm: running stats have length {} / {}, expected {c}",
                            mean.len(),
                            var.len()
                        )));
                    }
                    (mean.clone(), var.clone())
                }
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let plane = x.shape()[2] * x.shape()[3];
            let (gd, bd) = (gamma.data(), beta.data());
            let mut out = x.data().to_vec();
            for (i, chunk) in out.chunks_exact_mut(plane).enumerate() {
                let ch = i % c;
                let (m, s, g, b) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                chunk.iter_mut().for_each(|v| *v = (*v - m) * s * g + b);
            }
            Ok((
                Tensor::from_parts(x.shape().to_vec(), out),
                Saved::Bn { mean, inv_std },
            ))
        }
        Op::Dropout { mask } => {
            expect_arity(op, inputs, 1)?;
            let x = inputs[0];
            if mask.len() != x.numel() {
                return Err(Error::InvalidArgument(format!(
                    "dropout: mask length {} for {} elements",
                    mask.len(),
                    x.numel()
                )));
            }
            let data = x.data().iter().zip(mask).map(|(v, m)| v * m).collect();
            plain(Tensor::from_parts(x.shape().to_vec(), data))
        }
        Op::GlobalAvgPool => {
            expect_arity(op, inputs, 1)?;
            let x = inputs[0];
            expect_rank("global_avg_pool", x, 4)?;
            let s = x.shape();
            let plane = s[2] * s[3];
            let data = x
                .data()
                .chunks_exact(plane)
                .map(|c| c.iter().sum::<f64>() / plane as f64)
                .collect();
            plain(Tensor::from_parts(vec![s[0], s[1]], data))
        }
        Op::Reshape { shape } => {
            expect_arity(op, inputs, 1)?;
            plain(inputs[0].clone().reshape(shape.clone())?)
        }
        Op::ToInstances => {
            expect_arity(op, inputs, 1)?;
            let x = inputs[0];
            expect_rank("to_instances", x, 4)?;
            let s = x.shape();
            let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
            let mut data = vec![0.0; x.numel()];
            for b in 0..n {
                for ch in 0..c {
                    for p in 0..plane {
                        data[(b * plane + p) * c + ch] = x.data()[(b * c + ch) * plane + p];
                    }
                }
            }
            plain(Tensor::from_parts(vec![n * plane, c], data))
        }
        Op::SumAll | Op::MeanAll => {
            expect_arity(op, inputs, 1)?;
            let x = inputs[0];
            let s: f64 = x.data().iter().sum();
            let v = if matches!(op, Op::MeanAll) {
                s / x.numel() as f64
            } else {
                s
            };
            plain(Tensor::scalar(v))
        }
        Op::SumAxis { axis } | Op::MeanAxis { axis } | Op::MaxAxis { axis } => {
            expect_arity(op, inputs, 1)?;
            let x = inputs[0];
            check_axis(op.name(), x, *axis)?;
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            let mut out = vec![0.0; outer * inner];
            let mut idx = Vec::new();
            if matches!(op, Op::MaxAxis { .. }) {
                idx = vec![0usize; outer * inner];
            }
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let r = o * inner + i;
                    match op {
                        Op::MaxAxis { .. } => {
                            let mut best = at(0);
                            for l in 1..len {
                                if x.data()[at(l)] > x.data()[best] {
                                    best = at(l);
                                }
                            }
                            out[r] = x.data()[best];
                            idx[r] = best;
                        }
                        _ => {
                            let s: f64 = (0..len).map(|l| x.data()[at(l)]).sum();
                            out[r] = if matches!(op, Op::MeanAxis { .. }) {
                                s / len as f64
                            } else {
                                s
                            };
                        }
                    }
                }
            }
            let t = Tensor::from_parts(reduced_shape(x.shape(), *axis), out);
            let saved = if idx.is_empty() {
                Saved::None
            } else {
                Saved::Indices(idx)
            };
            Ok((t, saved))
        }
        Op::NormalizeLast => {
            expect_arity(op, inputs, 1)?;
            let x = inputs[0];
            let last = *x.shape().last().unwrap_or(&1);
            let mut out = x.data().to_vec();
            for row in out.chunks_exact_mut(last) {
                let s: f64 = row.iter().sum();
                if !(s > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "normalize_last: row sum {s} is not positive"
                    )));
                }
                row.iter_mut().for_each(|v| *v /= s);
            }
            plain(Tensor::from_parts(x.shape().to_vec(), out))
        }
        Op::WeightedSum => {
            expect_arity(op, inputs, 2)?;
            let (w, v) = (inputs[0], inputs[1]);
            expect_rank("weighted_sum", w, 2)?;
            expect_rank("weighted_sum", v, 3)?;
            if w.shape() != &v.shape()[..2] {
                return Err(Error::ShapeMismatch {
                    op: "weighted_sum",
                    lhs: w.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            let (n, p, c) = (v.shape()[0], v.shape()[1], v.shape()[2]);
            let mut out = vec![0.0; n * c];
            for b in 0..n {
                for q in 0..p {
                    let a = w.data()[b * p + q];
                    let row = &v.data()[(b * p + q) * c..(b * p + q + 1) * c];
                    out[b * c..(b + 1) * c]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(o, x)| *o += a * x);
                }
            }
            plain(Tensor::from_parts(vec![n, c], out))
        }
        Op::BagNll { labels } => {
            expect_arity(op, inputs, 1)?;
            let p = inputs[0];
            expect_rank("bag_nll", p, 2)?;
            let (n, c) = (p.shape()[0], p.shape()[1]);
            if labels.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "bag_nll: {} labels for {n} bags",
                    labels.len()
                )));
            }
            let mut total = 0.0;
            for (b, &y) in labels.iter().enumerate() {
                if y >= c {
                    return Err(Error::LabelOutOfRange {
                        label: y,
                        classes: c,
                    });
                }
                total -= p.data()[b * c + y].max(LOG_FLOOR).ln();
            }
            plain(Tensor::scalar(total / n as f64))
        }
    }
}

fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::from_parts(vec![n, m], out)
}

fn softmax(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let max = (0..len)
                .map(|l| x.data()[at(l)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for l in 0..len {
                let e = (x.data()[at(l)] - max).exp();
                out[at(l)] = e;
                sum += e;
            }
            for l in 0..len {
                out[at(l)] /= sum;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Per-channel mean and biased variance over (N, H, W).
pub(crate) fn batch_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let c = x.shape()[1];
    let plane = x.shape()[2] * x.shape()[3];
    let count = (x.shape()[0] * plane) as f64;
    let mut mean = vec![0.0; c];
    for (i, chunk) in x.data().chunks_exact(plane).enumerate() {
        mean[i % c] += chunk.iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; c];
    for (i, chunk) in x.data().chunks_exact(plane).enumerate() {
        let m = mean[i % c];
        var[i % c] += chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

/// Vector-Jacobian products for the inputs flagged in `need`.
pub(crate) fn backward(
    op: &Op,
    inputs: &[&Tensor],
    out: &Tensor,
    saved: &Saved,
    g: &[f64],
    need: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let map_unary = |f: &dyn Fn(usize) -> f64| -> Vec<Option<Vec<f64>>> {
        vec![Some((0..g.len()).map(|i| g[i] * f(i)).collect())]
    };
    match op {
        Op::Leaf => vec![],
        Op::Add | Op::Sub | Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let kind = broadcast_kind(op.name(), a, b).expect("validated in forward");
            let shape = a.shape();
            let ga = need[0].then(|| match op {
                Op::Mul => (0..g.len())
                    .map(|i| g[i] * b.data()[b_index(kind, shape, i)])
                    .collect(),
                _ => g.to_vec(),
            });
            let gb = need[1].then(|| {
                let mut acc = vec![0.0; b.numel()];
                for i in 0..g.len() {
                    let j = b_index(kind, shape, i);
                    acc[j] += match op {
                        Op::Add => g[i],
                        Op::Sub => -g[i],
                        _ => g[i] * a.data()[i],
                    };
                }
                acc
            });
            vec![ga, gb]
        }
        Op::Relu => {
            let x = inputs[0].data();
            map_unary(&|i| if x[i] > 0.0 { 1.0 } else { 0.0 })
        }
        Op::Tanh => {
            let y = out.data();
            map_unary(&|i| 1.0 - y[i] * y[i])
        }
        Op::Exp => {
            let y = out.data();
            map_unary(&|i| y[i])
        }
        Op::Log { .. } => {
            let x = inputs[0].data();
            map_unary(&|i| if x[i] > LOG_FLOOR { 1.0 / x[i] } else { 0.0 })
        }
        Op::Scale(s) => map_unary(&|_| *s),
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let ga = need[0].then(|| {
                let mut ga = vec![0.0; m * k];
                kernels::gemm(m, n, k, g, false, b.data(), true, 0.0, &mut ga);
                ga
            });
            let gb = need[1].then(|| {
                let mut gb = vec![0.0; k * n];
                kernels::gemm(k, m, n, a.data(), true, g, false, 0.0, &mut gb);
                gb
            });
            vec![ga, gb]
        }
        Op::Transpose => {
            let gt = Tensor::from_parts(out.shape().to_vec(), g.to_vec());
            vec![Some(transpose(&gt).into_data())]
        }
        Op::Softmax { axis } => {
            let (outer, len, inner) = axis_split(out.shape(), *axis);
            let y = out.data();
            let mut gx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                    for l in 0..len {
                        gx[at(l)] = y[at(l)] * (g[at(l)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }
        Op::ConcatChannels => {
            let s = out.shape();
            let (n, total, plane) = (s[0], s[1], s[2] * s[3]);
            let mut offset = 0;
            inputs
                .iter()
                .zip(need)
                .map(|(t, &needed)| {
                    let c = t.shape()[1];
                    let grad = needed.then(|| {
                        let mut gi = Vec::with_capacity(t.numel());
                        for b in 0..n {
                            let start = (b * total + offset) * plane;
                            gi.extend_from_slice(&g[start..start + c * plane]);
                        }
                        gi
                    });
                    offset += c;
                    grad
                })
                .collect()
        }
        Op::SliceChannels { start, len } => {
            let s = inputs[0].shape();
            let plane = s[2] * s[3];
            let mut gx = vec![0.0; inputs[0].numel()];
            for b in 0..s[0] {
                let dst = (b * s[1] + start) * plane;
                let src = b * len * plane;
                gx[dst..dst + len * plane].copy_from_slice(&g[src..src + len * plane]);
            }
            vec![Some(gx)]
        }
        Op::Conv2d { stride, padding } => {
            let (x, w) = (inputs[0], inputs[1]);
            let geom = conv_geom("conv2d", x, w, *stride, *padding).expect("validated in forward");
            let need3 = [need[0], need[1], need.get(2).copied().unwrap_or(false)];
            let grads = kernels::conv2d_backward(x.data(), x.shape()[0], w.data(), g, &geom, need3);
            let mut res = vec![grads.x, grads.weight];
            if inputs.len() == 3 {
                res.push(grads.bias);
            }
            res
        }
        Op::Pool2d {
            kind,
            k,
            stride,
            padding,
        } => {
            let geom = pool_geom(inputs[0], *k, *stride, *padding).expect("validated in forward");
            let argmax = match saved {
                Saved::Indices(idx) => idx.as_slice(),
                _ => &[],
            };
            vec![Some(kernels::pool2d_backward(g, *kind, &geom, argmax))]
        }
        Op::BatchNorm { stats, .. } => {
            let (x, gamma) = (inputs[0], inputs[1]);
            let Saved::Bn { mean, inv_std } = saved else {
                unreachable!("batch_norm saves its statistics")
            };
            let c = x.shape()[1];
            let plane = x.shape()[2] * x.shape()[3];
            let count = (x.shape()[0] * plane) as f64;
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for (i, (xc, gc)) in x
                .data()
                .chunks_exact(plane)
                .zip(g.chunks_exact(plane))
                .enumerate()
            {
                let ch = i % c;
                for (xv, gv) in xc.iter().zip(gc) {
                    sum_g[ch] += gv;
                    sum_gx[ch] += gv * (xv - mean[ch]) * inv_std[ch];
                }
            }
            let gx = need[0].then(|| {
                let mut gx = vec![0.0; x.numel()];
                for (i, ((xc, gc), dst)) in x
                    .data()
                    .chunks_exact(plane)
                    .zip(g.chunks_exact(plane))
                    .zip(gx.chunks_exact_mut(plane))
                    .enumerate()
                {
                    let ch = i % c;
                    let scale = gamma.data()[ch] * inv_std[ch];
                    for ((xv, gv), d) in xc.iter().zip(gc).zip(dst.iter_mut()) {
                        *d = match stats {
                            BnStats::Running { .. } => gv * scale,
                            BnStats::Batch => {
                                let xhat = (xv - mean[ch]) * inv_std[ch];
                                scale * (gv - sum_g[ch] / count - xhat * sum_gx[ch] / count)
                            }
                        };
                    }
                }
                gx
            });
            vec![gx, need[1].then_some(sum_gx), need[2].then_some(sum_g)]
        }
        Op::Dropout { mask } => vec![Some(g.iter().zip(mask).map(|(a, b)| a * b).collect())],
        Op::GlobalAvgPool => {
            let s = inputs[0].shape();
            let plane = s[2] * s[3];
            let mut gx = vec![0.0; inputs[0].numel()];
            for (chunk, gv) in gx.chunks_exact_mut(plane).zip(g) {
                chunk.fill(gv / plane as f64);
            }
            vec![Some(gx)]
        }
        Op::Reshape { .. } => vec![Some(g.to_vec())],
        Op::ToInstances => {
            let s = inputs[0].shape();
            let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
            let mut gx = vec![0.0; inputs[0].numel()];
            for b in 0..n {
                for ch in 0..c {
                    for p in 0..plane {
                        gx[(b * c + ch) * plane + p] = g[(b * plane + p) * c + ch];
                    }
                }
            }
            vec![Some(gx)]
        }
        Op::SumAll => vec![Some(vec![g[0]; inputs[0].numel()])],
        Op::MeanAll => {
            let n = inputs[0].numel();
            vec![Some(vec![g[0] / n as f64; n])]
        }
        Op::SumAxis { axis } | Op::MeanAxis { axis } => {
            let (outer, len, inner) = axis_split(inputs[0].shape(), *axis);
            let scale = if matches!(op, Op::MeanAxis { .. }) {
                1.0 / len as f64
            } else {
                1.0
            };
            let mut gx = vec![0.0; inputs[0].numel()];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        gx[(o * len + l) * inner + i] = g[o * inner + i] * scale;
                    }
                }
            }
            vec![Some(gx)]
        }
        Op::MaxAxis { .. } => {
            let Saved::Indices(idx) = saved else {
                unreachable!("max_axis saves its argmax")
            };
            let mut gx = vec![0.0; inputs[0].numel()];
            for (r, &src) in idx.iter().enumerate() {
                gx[src] += g[r];
            }
            vec![Some(gx)]
        }
        Op::NormalizeLast => {
            let x = inputs[0].data();
            let y = out.data();
            let last = *out.shape().last().unwrap_or(&1);
            let mut gx = vec![0.0; x.len()];
            for r in 0..x.len() / last {
                let span = r * last..(r + 1) * last;
                let s: f64 = x[span.clone()].iter().sum();
                let dot: f64 = span.clone().map(|j| g[j] * y[j]).sum();
                for j in span {
                    gx[j] = (g[j] - dot) / s;
                }
            }
            vec![Some(gx)]
        }
        Op::WeightedSum => {
            let (w, v) = (inputs[0], inputs[1]);
            let (n, p, c) = (v.shape()[0], v.shape()[1], v.shape()[2]);
            let gw = need[0].then(|| {
                let mut gw = vec![0.0; n * p];
                for b in 0..n {
                    for q in 0..p {
                        let row = &v.data()[(b * p + q) * c..(b * p + q + 1) * c];
                        gw[b * p + q] = row.iter().zip(&g[b * c..(b + 1) * c]).map(|(x, y)| x * y).sum();
                    }
                }
                gw
            });
            let gv = need[1].then(|| {
                let mut gv = vec![0.0; v.numel()];
                for b in 0..n {
                    for q in 0..p {
                        let a = w.data()[b * p + q];
                        for k in 0..c {
                            gv[(b * p + q) * c + k] = a * g[b * c + k];
                        }
                    }
                }
                gv
            });
            vec![gw, gv]
        }
        Op::BagNll { labels } => {
            let p = inputs[0];
            let (n, c) = (p.shape()[0], p.shape()[1]);
            let mut gp = vec![0.0; p.numel()];
            for (b, &y) in labels.iter().enumerate() {
                let v = p.data()[b * c + y];
                if v > LOG_FLOOR {
                    gp[b * c + y] = -g[0] / (n as f64 * v);
                }
            }
            vec![Some(gp)]
        }
    }
}
