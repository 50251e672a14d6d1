use crate::error::Result;
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// Elementwise nonlinearities. `Huber` is the unit-threshold smooth-L1 kernel
/// `0.5·x²` for `|x| < 1` and `|x| − 0.5` otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    /// Tanh approximation of GELU.
    Gelu,
    Softplus,
    Abs,
    Huber,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dConfig {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dConfig {
    fn default() -> Self {
        Conv2dConfig {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

/// A named learnable tensor. The name identifies it on a tape and in
/// checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Param {
            name: name.into(),
            value,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// The operation set every differentiable computation is written against.
///
/// [`Eager`] evaluates values only; [`crate::Tape`] additionally records the
/// operations for reverse-mode differentiation.
pub trait Graph<T: Scalar> {
    type Node: Clone;

    fn constant(&self, value: Tensor<T>) -> Self::Node;
    fn param(&self, param: &Param<T>) -> Self::Node;
    fn value(&self, node: &Self::Node) -> Tensor<T>;
    fn shape(&self, node: &Self::Node) -> Vec<usize>;

    fn binary(&self, a: &Self::Node, b: &Self::Node, op: BinaryOp) -> Result<Self::Node>;
    fn scale(&self, a: &Self::Node, factor: T) -> Self::Node;
    fn add_scalar(&self, a: &Self::Node, offset: T) -> Self::Node;
    fn conv2d(
        &self,
        x: &Self::Node,
        weight: &Self::Node,
        bias: Option<&Self::Node>,
        cfg: Conv2dConfig,
    ) -> Result<Self::Node>;
    fn matmul(&self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    fn pow_clamped(&self, x: &Self::Node, gamma: &Self::Node, eps: T) -> Result<Self::Node>;
    fn activation(&self, x: &Self::Node, kind: Activation) -> Self::Node;
    fn softmax(&self, x: &Self::Node, axis: isize) -> Result<Self::Node>;
    fn reduce(&self, x: &Self::Node, op: ReduceOp, axes: &[usize]) -> Result<Self::Node>;
    fn reshape(&self, x: &Self::Node, shape: &[usize]) -> Result<Self::Node>;
    /// Swaps the last two axes.
    fn transpose(&self, x: &Self::Node) -> Result<Self::Node>;
    /// Slice `[start, start + len)` along `axis`.
    fn narrow(&self, x: &Self::Node, axis: usize, start: usize, len: usize) -> Result<Self::Node>;

    fn add(&self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.binary(a, b, BinaryOp::Add)
    }

    fn sub(&self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.binary(a, b, BinaryOp::Sub)
    }

    fn mul(&self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.binary(a, b, BinaryOp::Mul)
    }

    /// Sum over every element, as a rank-0 node.
    fn sum_all(&self, x: &Self::Node) -> Result<Self::Node> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, ReduceOp::Sum, &axes)
    }

    /// Mean over every element, as a rank-0 node.
    fn mean_all(&self, x: &Self::Node) -> Result<Self::Node> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, ReduceOp::Mean, &axes)
    }
}

/// Value-only evaluation; intermediates are dropped as soon as they go out
/// of scope.
#[derive(Debug, Clone, Copy, Default)]
pub struct Eager;

impl<T: Scalar> Graph<T> for Eager {
    type Node = Tensor<T>;

    fn constant(&self, value: Tensor<T>) -> Tensor<T> {
        value
    }

    fn param(&self, param: &Param<T>) -> Tensor<T> {
        param.value.clone()
    }

    fn value(&self, node: &Tensor<T>) -> Tensor<T> {
        node.clone()
    }

    fn shape(&self, node: &Tensor<T>) -> Vec<usize> {
        node.shape().to_vec()
    }

    fn binary(&self, a: &Tensor<T>, b: &Tensor<T>, op: BinaryOp) -> Result<Tensor<T>> {
        kernels::binary(a, b, op)
    }

    fn scale(&self, a: &Tensor<T>, factor: T) -> Tensor<T> {
        a.map(|v| v * factor)
    }

    fn add_scalar(&self, a: &Tensor<T>, offset: T) -> Tensor<T> {
        a.map(|v| v + offset)
    }

    fn conv2d(
        &self,
        x: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        cfg: Conv2dConfig,
    ) -> Result<Tensor<T>> {
        kernels::conv2d(x, weight, bias, cfg)
    }

    fn matmul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::matmul(a, b)
    }

    fn pow_clamped(&self, x: &Tensor<T>, gamma: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        kernels::pow_clamped(x, gamma, eps)
    }

    fn activation(&self, x: &Tensor<T>, kind: Activation) -> Tensor<T> {
        kernels::activation(x, kind)
    }

    fn softmax(&self, x: &Tensor<T>, axis: isize) -> Result<Tensor<T>> {
        kernels::softmax(x, axis)
    }

    fn reduce(&self, x: &Tensor<T>, op: ReduceOp, axes: &[usize]) -> Result<Tensor<T>> {
        kernels::reduce(x, op, axes)
    }

    fn reshape(&self, x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        x.reshape(shape)
    }

    fn transpose(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::transpose(x)
    }

    fn narrow(&self, x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        kernels::narrow(x, axis, start, len)
    }
}
