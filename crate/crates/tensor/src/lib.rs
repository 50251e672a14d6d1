//! Dense float tensors and a dynamic reverse-mode differentiation tape.
//!
//! Computations are written once against the [`Graph`] trait and run either
//! on [`Eager`] (plain values, nothing retained) or on a [`Tape`] that records
//! every operation so [`Tape::backward`] can populate gradients.

mod error;
mod graph;
pub mod gradcheck;
pub mod kernels;
mod scalar;
mod shape;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Activation, BinaryOp, Conv2dConfig, Eager, Graph, Param, ReduceOp};
pub use scalar::Scalar;
pub use shape::broadcast_shape;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
