use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::graph::{Activation, BinaryOp, Conv2dConfig, Graph, Param, ReduceOp};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Binary(Var, Var, BinaryOp),
    Scale(Var, T),
    AddScalar(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        cfg: Conv2dConfig,
    },
    Matmul(Var, Var),
    PowClamped {
        x: Var,
        gamma: Var,
        eps: T,
    },
    Activation(Var, Activation),
    Softmax(Var, isize),
    Reduce(Var, ReduceOp, Vec<usize>),
    Reshape(Var),
    Transpose(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

#[derive(Debug, Default)]
struct Inner<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
}

/// Wengert list for one forward/backward pass.
///
/// Every operation appends a node holding its output value and the rule to
/// propagate gradients to its inputs. [`Tape::backward`] consumes the tape.
#[derive(Debug)]
pub struct Tape<T: Scalar> {
    inner: RefCell<Inner<T>>,
    frozen: Vec<String>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                params: HashMap::new(),
            }),
            frozen: Vec::new(),
        }
    }

    /// Parameters whose names start with `prefix` enter the tape as constants.
    pub fn freeze(mut self, prefix: impl Into<String>) -> Self {
        self.frozen.push(prefix.into());
        self
    }

    /// Unnamed leaf that receives a gradient.
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.inner.borrow().nodes[v.0].requires_grad
    }

    /// Variable already registered for a named parameter.
    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.inner.borrow().params.get(name).copied()
    }

    fn push(&self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(inner.nodes.len() - 1)
    }

    fn get(&self, v: Var) -> Tensor<T> {
        self.inner.borrow().nodes[v.0].value.clone()
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        let inner = self.inner.borrow();
        vars.iter().any(|v| inner.nodes[v.0].requires_grad)
    }

    fn record(&self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let rg = self.any_grad(inputs);
        let op = if rg { op } else { Op::Leaf };
        self.push(value, rg, op)
    }

    /// Runs reverse accumulation from the scalar `loss`.
    ///
    /// Every gradient-requiring leaf gets an entry; leaves the loss does not
    /// depend on get zeros.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let Inner { mut nodes, params } = self.inner.into_inner();
        let loss_node = nodes
            .get(loss.0)
            .ok_or_else(|| TensorError::Contract("loss is not on this tape".into()))?;
        if loss_node.value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        let mut leaves: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        if loss_node.requires_grad {
            grads[loss.0] = Some(Tensor::ones(loss_node.value.shape()));
        }

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                leaves[id] = Some(g);
                continue;
            }
            for (input, ig) in input_grads(&nodes, node, &g)? {
                accumulate(&mut grads[input.0], ig)?;
            }
            // intermediate values are no longer needed once propagated
            nodes[id].value = Tensor::zeros([0]);
        }

        for (id, node) in nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && leaves[id].is_none() {
                leaves[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { leaves, params })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            if acc.shape() != g.shape() {
                return Err(TensorError::shape("gradient accumulation", acc.shape(), g.shape()));
            }
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    Ok(())
}

fn input_grads<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
) -> Result<Vec<(Var, Tensor<T>)>> {
    let val = |v: Var| &nodes[v.0].value;
    let rg = |v: Var| nodes[v.0].requires_grad;
    let mut out = Vec::with_capacity(3);
    match &node.op {
        Op::Leaf => {}
        Op::Binary(a, b, op) => {
            let (ga, gb) = kernels::binary_backward(val(*a), val(*b), *op, g, (rg(*a), rg(*b)));
            out.extend(ga.map(|t| (*a, t)));
            out.extend(gb.map(|t| (*b, t)));
        }
        Op::Scale(a, s) => out.push((*a, g.map(|v| v * *s))),
        Op::AddScalar(a) => out.push((*a, g.clone())),
        Op::Conv2d { x, w, b, cfg } => {
            let need_b = b.is_some_and(rg);
            let (gx, gw, gb) =
                kernels::conv2d_backward(val(*x), val(*w), g, *cfg, (rg(*x), rg(*w), need_b))?;
            out.extend(gx.map(|t| (*x, t)));
            out.extend(gw.map(|t| (*w, t)));
            if let (Some(b), Some(gb)) = (b, gb) {
                out.push((*b, gb));
            }
        }
        Op::Matmul(a, b) => {
            let (ga, gb) = kernels::matmul_backward(val(*a), val(*b), g, (rg(*a), rg(*b)))?;
            out.extend(ga.map(|t| (*a, t)));
            out.extend(gb.map(|t| (*b, t)));
        }
        Op::PowClamped { x, gamma, eps } => {
            let (gx, gg) = kernels::pow_clamped_backward(
                val(*x),
                val(*gamma),
                &node.value,
                *eps,
                g,
                (rg(*x), rg(*gamma)),
            )?;
            out.extend(gx.map(|t| (*x, t)));
            out.extend(gg.map(|t| (*gamma, t)));
        }
        Op::Activation(x, kind) => {
            out.push((*x, kernels::activation_backward(val(*x), &node.value, *kind, g)));
        }
        Op::Softmax(x, axis) => out.push((*x, kernels::softmax_backward(&node.value, *axis, g)?)),
        Op::Reduce(x, op, axes) => {
            out.push((*x, kernels::reduce_backward(val(*x).shape(), *op, axes, g)?));
        }
        Op::Reshape(x) => out.push((*x, g.reshape(val(*x).shape())?)),
        Op::Transpose(x) => out.push((*x, kernels::transpose(g)?)),
        Op::Narrow { x, axis, start } => {
            out.push((*x, kernels::narrow_backward(val(*x).shape(), *axis, *start, g)?));
        }
    }
    out.retain(|(v, _)| rg(*v));
    Ok(out)
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: Vec<Option<Tensor<T>>>,
    params: HashMap<String, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a named parameter, if it was recorded with gradients.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|v| self.get(*v))
    }

    /// Names of every parameter that received a gradient slot.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params
            .iter()
            .filter(|(_, v)| self.get(**v).is_some())
            .map(|(k, _)| k.as_str())
    }
}

impl<T: Scalar> Graph<T> for Tape<T> {
    type Node = Var;

    fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    fn param(&self, param: &Param<T>) -> Var {
        if let Some(v) = self.param_var(&param.name) {
            return v;
        }
        let frozen = self.frozen.iter().any(|p| param.name.starts_with(p.as_str()));
        let v = self.push(param.value.clone(), !frozen, Op::Leaf);
        self.inner.borrow_mut().params.insert(param.name.clone(), v);
        v
    }

    fn value(&self, node: &Var) -> Tensor<T> {
        self.get(*node)
    }

    fn shape(&self, node: &Var) -> Vec<usize> {
        self.inner.borrow().nodes[node.0].value.shape().to_vec()
    }

    fn binary(&self, a: &Var, b: &Var, op: BinaryOp) -> Result<Var> {
        let out = kernels::binary(&self.get(*a), &self.get(*b), op)?;
        Ok(self.record(out, &[*a, *b], Op::Binary(*a, *b, op)))
    }

    fn scale(&self, a: &Var, factor: T) -> Var {
        let out = self.get(*a).map(|v| v * factor);
        self.record(out, &[*a], Op::Scale(*a, factor))
    }

    fn add_scalar(&self, a: &Var, offset: T) -> Var {
        let out = self.get(*a).map(|v| v + offset);
        self.record(out, &[*a], Op::AddScalar(*a))
    }

    fn conv2d(&self, x: &Var, weight: &Var, bias: Option<&Var>, cfg: Conv2dConfig) -> Result<Var> {
        let bt = bias.map(|b| self.get(*b));
        let out = kernels::conv2d(&self.get(*x), &self.get(*weight), bt.as_ref(), cfg)?;
        let mut inputs = vec![*x, *weight];
        inputs.extend(bias.copied());
        Ok(self.record(
            out,
            &inputs,
            Op::Conv2d {
                x: *x,
                w: *weight,
                b: bias.copied(),
                cfg,
            },
        ))
    }

    fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = kernels::matmul(&self.get(*a), &self.get(*b))?;
        Ok(self.record(out, &[*a, *b], Op::Matmul(*a, *b)))
    }

    fn pow_clamped(&self, x: &Var, gamma: &Var, eps: T) -> Result<Var> {
        let out = kernels::pow_clamped(&self.get(*x), &self.get(*gamma), eps)?;
        Ok(self.record(
            out,
            &[*x, *gamma],
            Op::PowClamped {
                x: *x,
                gamma: *gamma,
                eps,
            },
        ))
    }

    fn activation(&self, x: &Var, kind: Activation) -> Var {
        let out = kernels::activation(&self.get(*x), kind);
        self.record(out, &[*x], Op::Activation(*x, kind))
    }

    fn softmax(&self, x: &Var, axis: isize) -> Result<Var> {
        let out = kernels::softmax(&self.get(*x), axis)?;
        Ok(self.record(out, &[*x], Op::Softmax(*x, axis)))
    }

    fn reduce(&self, x: &Var, op: ReduceOp, axes: &[usize]) -> Result<Var> {
        let out = kernels::reduce(&self.get(*x), op, axes)?;
        Ok(self.record(out, &[*x], Op::Reduce(*x, op, axes.to_vec())))
    }

    fn reshape(&self, x: &Var, shape: &[usize]) -> Result<Var> {
        let out = self.get(*x).reshape(shape)?;
        Ok(self.record(out, &[*x], Op::Reshape(*x)))
    }

    fn transpose(&self, x: &Var) -> Result<Var> {
        let out = kernels::transpose(&self.get(*x))?;
        Ok(self.record(out, &[*x], Op::Transpose(*x)))
    }

    fn narrow(&self, x: &Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = kernels::narrow(&self.get(*x), axis, start, len)?;
        Ok(self.record(out, &[*x], Op::Narrow { x: *x, axis, start }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new([3], vec![1.0, -2.0, 5.0]).unwrap());
        let loss = tape.sum_all(&x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gives_twice_input() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum_all(&sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones([2]));
        let unused = tape.leaf(Tensor::ones([4]));
        let loss = tape.sum_all(&x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones([2]));
        assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn frozen_params_are_constants() {
        let tape = Tape::<f64>::new().freeze("local.");
        let frozen = Param::new("local.w", Tensor::ones([2]));
        let live = Param::new("global.w", Tensor::ones([2]));
        let a = tape.param(&frozen);
        let b = tape.param(&live);
        assert_eq!(tape.param(&live), b);
        let p = tape.mul(&a, &b).unwrap();
        let loss = tape.sum_all(&p).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.param("local.w").is_none());
        assert_eq!(grads.param("global.w").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        // loss = sum(x) + sum(3x) → grad 4
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones([3]));
        let y = tape.scale(&x, 3.0);
        let z = tape.add(&x, &y).unwrap();
        let loss = tape.sum_all(&z).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0; 3]);
    }
}
