//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable once built; every operation records its inputs so a
//! scalar result can be differentiated by walking the graph in reverse
//! topological order.  All reductions run in a fixed sequential order, so
//! forward values and gradients are bit-identical across runs on the same
//! machine.

mod backward;
mod conv;
mod gradcheck;
mod ops;

pub use backward::Gradients;
pub use gradcheck::finite_difference;
pub use ops::concat0;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// What produced a tensor; `Leaf` marks parameters, inputs and constants.
#[derive(Debug)]
pub(crate) enum Op<S: Scalar> {
    Leaf,
    Add(Tensor<S>, Tensor<S>),
    Mul(Tensor<S>, Tensor<S>),
    /// `mul * x + add`, elementwise.
    Affine { x: Tensor<S>, mul: S },
    Square(Tensor<S>),
    Sigmoid(Tensor<S>),
    LeakyRelu { x: Tensor<S>, slope: S },
    /// `ln(max(x, floor))`; the gradient is zero on the clipped side.
    LnClipped { x: Tensor<S>, floor: S },
    /// Softmax over axis 0 of a `[M, H, W]` tensor, independently per pixel.
    SoftmaxChannels(Tensor<S>),
    Conv2d { x: Tensor<S>, w: Tensor<S>, b: Tensor<S>, stride: usize, pad: usize },
    Dense { x: Tensor<S>, w: Tensor<S>, b: Tensor<S> },
    /// Per-channel spatial maximum; `argmax` holds the first (row-major)
    /// maximizing linear pixel index per channel.
    GlobalMaxPool { x: Tensor<S>, argmax: Vec<usize> },
    GlobalAvgPool(Tensor<S>),
    UpsampleNearest { x: Tensor<S>, factor: usize },
    Concat0(Vec<Tensor<S>>),
    Narrow0 { x: Tensor<S>, start: usize, len: usize },
    Reshape(Tensor<S>),
    /// `[C, H, W] * [1, H, W]`, the map broadcast across channels.
    MulChannelBroadcast { x: Tensor<S>, map: Tensor<S> },
    SumAll(Tensor<S>),
    MeanAll(Tensor<S>),
}

#[derive(Debug)]
struct Inner<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<S>,
    op: Op<S>,
}

/// Immutable dense tensor; cloning is a cheap handle copy.
#[derive(Debug, Clone)]
pub struct Tensor<S: Scalar> {
    inner: Arc<Inner<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<S>, op: Op<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                op,
            }),
        }
    }

    /// A differentiable graph leaf (parameter, input or constant).
    pub fn leaf(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor::from_op(shape.to_vec(), data, Op::Leaf))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::from_op(shape.to_vec(), vec![S::zero(); numel], Op::Leaf)
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let numel = shape.iter().product();
        Tensor::from_op(shape.to_vec(), vec![v; numel], Op::Leaf)
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(v: S) -> Self {
        Tensor::from_op(Vec::new(), vec![v], Op::Leaf)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[S] {
        &self.inner.data
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.inner.op, Op::Leaf)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data[0])
    }

    /// Same identity (graph node), not same contents.
    pub fn same_node(&self, other: &Tensor<S>) -> bool {
        self.inner.id == other.inner.id
    }

    pub(crate) fn op(&self) -> &Op<S> {
        &self.inner.op
    }

    /// Detached copy of the values: a fresh leaf sharing no graph history.
    pub fn detach(&self) -> Tensor<S> {
        Tensor::from_op(self.inner.shape.clone(), self.inner.data.clone(), Op::Leaf)
    }

    /// Convert element type (used to run checks in `f64`).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&v| T::from_f64(v.to_f64())).collect();
        Tensor::from_op(self.inner.shape.clone(), data, Op::Leaf)
    }
}

impl<S: Scalar> Op<S> {
    pub(crate) fn inputs(&self) -> Vec<&Tensor<S>> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Affine { x, .. }
            | Op::Square(x)
            | Op::Sigmoid(x)
            | Op::LeakyRelu { x, .. }
            | Op::LnClipped { x, .. }
            | Op::SoftmaxChannels(x)
            | Op::GlobalAvgPool(x)
            | Op::UpsampleNearest { x, .. }
            | Op::Narrow0 { x, .. }
            | Op::Reshape(x)
            | Op::SumAll(x)
            | Op::MeanAll(x)
            | Op::GlobalMaxPool { x, .. } => vec![x],
            Op::Conv2d { x, w, b, .. } | Op::Dense { x, w, b } => vec![x, w, b],
            Op::Concat0(xs) => xs.iter().collect(),
            Op::MulChannelBroadcast { x, map } => vec![x, map],
        }
    }
}

pub(crate) fn check_same_shape<S: Scalar>(
    what: &str,
    a: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}
