//! Dense row-major `f64` tensors.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape,
                reason: "dimensions must be positive".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape,
                reason: format!("expected {numel} elements, got {}", data.len()),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Builds a tensor from parts already known to be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(f).collect())
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the stored gradient, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value at a multi-index. Panics on out-of-range indices.
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {i} out of bounds for dim {d}");
                acc * d + i
            })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Self> {
        let first = items.first().ok_or_else(|| {
            Error::InvalidArgument("stack: need at least one tensor".into())
        })?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: first.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self::from_parts(shape, data))
    }

    /// Sub-tensor `index` along the leading axis.
    pub fn index_first(&self, index: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.shape.len() > 1 {
            self.shape[1..].to_vec()
        } else {
            vec![1]
        };
        Tensor::from_parts(shape, self.data[index * inner..(index + 1) * inner].to_vec())
    }
}
