//! Reverse-mode automatic differentiation on an explicit operation tape.
//!
//! Every operation appends a node holding its op, input ids, output value and
//! whatever it saved for the backward pass. Inputs always precede outputs, so
//! the node order is already a topological order and `backward` is a single
//! reverse sweep.

mod op;

use std::sync::atomic::{AtomicU32, Ordering};

pub use op::{BnStats, Op, LOG_FLOOR};
pub(crate) use op::batch_moments;

use crate::error::{Error, Result};
use crate::kernels::PoolKind;
use crate::tensor::Tensor;
use op::Saved;

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogMode {
    /// `log` of a non-positive value is an error.
    Strict,
    /// `log` clamps its input at [`LOG_FLOOR`].
    Clamped,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Tanh,
    Exp,
    Log,
    Scale(f64),
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
    saved: Saved,
}

#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    log_mode: LogMode,
    fault: Option<&'static str>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_log_mode(LogMode::Strict)
    }

    /// A tape whose `log` clamps instead of failing.
    pub fn training() -> Self {
        Self::with_log_mode(LogMode::Clamped)
    }

    pub fn with_log_mode(log_mode: LogMode) -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            log_mode,
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scales the backward rule of every op named `op_name` by 1.5.
    /// Only used to prove that gradient checks catch a broken rule.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, op_name: &'static str) {
        self.fault = Some(op_name);
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::NotOnTape { id: v.index });
        }
        Ok(())
    }

    /// Records a leaf. Its `requires_grad` flag decides whether `backward`
    /// fills in its gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, Vec::new(), value, Saved::None)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor, saved: Saved) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            op,
            inputs,
            value,
            saved,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.index].value.shape()
    }

    /// Gradient stored on a leaf by the last `backward` call(s).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.index).and_then(|n| n.value.grad())
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    /// Records `op` applied to `inputs`.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.index].value).collect();
        let (mut out, saved) = op::forward(&op, &values)?;
        if cfg!(debug_assertions) && !out.is_finite() && values.iter().all(|t| t.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("output of {}", op.name()),
            });
        }
        let requires_grad = values.iter().any(|t| t.requires_grad());
        out.set_requires_grad(requires_grad);
        Ok(self.push(op, inputs.to_vec(), out, saved))
    }

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let op = match kind {
            Elementwise::Add => Op::Add,
            Elementwise::Sub => Op::Sub,
            Elementwise::Mul => Op::Mul,
            Elementwise::Relu => Op::Relu,
            Elementwise::Tanh => Op::Tanh,
            Elementwise::Exp => Op::Exp,
            Elementwise::Log => Op::Log {
                clamp: self.log_mode == LogMode::Clamped,
            },
            Elementwise::Scale(s) => Op::Scale(s),
        };
        let binary = matches!(op, Op::Add | Op::Sub | Op::Mul);
        match (binary, b) {
            (true, Some(b)) => self.apply(op, &[a, b]),
            (false, None) => self.apply(op, &[a]),
            (true, None) => Err(Error::InvalidArgument(format!(
                "{} needs a second operand",
                op.name()
            ))),
            (false, Some(_)) => Err(Error::InvalidArgument(format!(
                "{} takes a single operand",
                op.name()
            ))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Relu, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Tanh, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.elementwise(Elementwise::Log, a, None)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(Op::Scale(s), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Transpose, &[a])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Softmax { axis }, &[x])
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.len() == 1 {
            self.check(xs[0])?;
            return Ok(xs[0]);
        }
        self.apply(Op::ConcatChannels, xs)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(Op::SliceChannels { start, len }, &[x])
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let op = Op::Conv2d { stride, padding };
        match bias {
            Some(b) => self.apply(op, &[x, weight, b]),
            None => self.apply(op, &[x, weight]),
        }
    }

    pub fn pool2d(
        &mut self,
        kind: PoolKind,
        x: Var,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.apply(
            Op::Pool2d {
                kind,
                k,
                stride,
                padding,
            },
            &[x],
        )
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        stats: BnStats,
    ) -> Result<Var> {
        self.apply(Op::BatchNorm { eps, stats }, &[x, gamma, beta])
    }

    pub fn dropout_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        self.apply(Op::Dropout { mask }, &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::GlobalAvgPool, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(
            Op::Reshape {
                shape: shape.to_vec(),
            },
            &[x],
        )
    }

    pub fn to_instances(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::ToInstances, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::SumAll, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::MeanAll, &[x])
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Op::SumAxis { axis }, &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Op::MeanAxis { axis }, &[x])
    }

    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Op::MaxAxis { axis }, &[x])
    }

    pub fn normalize_last(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::NormalizeLast, &[x])
    }

    pub fn weighted_sum(&mut self, weights: Var, values: Var) -> Result<Var> {
        self.apply(Op::WeightedSum, &[weights, values])
    }

    pub fn bag_nll(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        self.apply(
            Op::BagNll {
                labels: labels.to_vec(),
            },
            &[probs],
        )
    }

    /// Back-propagates from a scalar `loss`, adding into the gradient of
    /// every leaf that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        let shape = self.nodes[loss.index].value.shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar {
                shape: shape.to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(vec![1.0]);
        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.value.requires_grad() {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            let values: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.index].value).collect();
            let need: Vec<bool> = values.iter().map(|t| t.requires_grad()).collect();
            let mut input_grads = op::backward(&node.op, &values, &node.value, &node.saved, &g, &need);
            if self.fault == Some(node.op.name()) {
                for ig in input_grads.iter_mut().flatten() {
                    ig.iter_mut().for_each(|v| *v *= 1.5);
                }
            }
            let inputs = node.inputs.clone();
            for (v, ig) in inputs.into_iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[v.index].value.requires_grad() {
                    continue;
                }
                match &mut grads[v.index] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(())
    }

    /// Re-executes every recorded op from the stored leaf values and returns
    /// the recomputed value of each node.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match node.op {
                Op::Leaf => node.value.clone(),
                _ => {
                    let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &values[v.index]).collect();
                    op::forward(&node.op, &inputs)?.0
                }
            };
            values.push(value);
        }
        Ok(values)
    }

    /// Ops and input indices in recording order.
    pub fn records(&self) -> impl Iterator<Item = (&Op, Vec<usize>, usize)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (&n.op, n.inputs.iter().map(|v| v.index).collect(), i))
    }
}
