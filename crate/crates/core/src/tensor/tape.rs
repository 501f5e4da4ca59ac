use super::conv::{self, ConvGeometry};
use super::pool::{self, PoolGeometry};
use super::{norm, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Conv3d { input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeometry },
    Pool { input: Var, geom: PoolGeometry, argmax: Vec<usize> },
    GroupNorm { input: Var, gamma: Var, beta: Var, groups: usize, per_slice: bool, mean: Vec<T>, rstd: Vec<T> },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, T),
    Sum(Var),
    Upsample2x(Var),
    Reshape(Var),
    Permute { input: Var, perm: Vec<usize> },
    Narrow { input: Var, axis: usize, start: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    BceWithLogits { pred: Var, target: Tensor<T>, weights: Tensor<T>, weight_sum: T },
    SmoothL1 { pred: Var, target: Tensor<T>, weights: Tensor<T>, beta: T, weight_sum: T },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Wengert list of executed ops.
///
/// Nodes are appended in execution order, so the node order is a topological
/// order and the reverse sweep in [`Tape::backward`] visits each node once
/// after all of its consumers.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Leaves with `requires_grad` receive a gradient on
    /// [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to `var`.
    pub fn grad(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Reverse sweep from a single-element loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_shape = self.shape(loss).to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(&loss_shape));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let contributions = self.vjp(idx, &upstream);
            grads[idx] = Some(upstream);
            for (var, g) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // Leaves that were not reachable from the loss still get a zero grad.
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` for each of its inputs.
    fn vjp(&self, idx: usize, up: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv3d { input, kernel, bias, geom } => {
                let grads = conv::backward(
                    val(*input),
                    val(*kernel),
                    up,
                    geom,
                    want(*input),
                    want(*kernel),
                );
                let mut out = Vec::new();
                if let Some(dx) = grads.input {
                    out.push((*input, dx));
                }
                if let Some(dw) = grads.kernel {
                    out.push((*kernel, dw));
                }
                if let Some(b) = bias {
                    if want(*b) {
                        out.push((*b, conv::bias_grad(up)));
                    }
                }
                out
            }
            Op::Pool { input, geom, argmax } => {
                vec![(*input, pool::backward(val(*input).shape(), up, geom, argmax))]
            }
            Op::GroupNorm { input, gamma, beta, groups, per_slice, mean, rstd } => {
                let g = norm::backward(val(*input), val(*gamma), up, *groups, *per_slice, mean, rstd);
                vec![(*input, g.input), (*gamma, g.gamma), (*beta, g.beta)]
            }
            Op::Relu(x) => {
                let x_val = val(*x);
                let data = x_val
                    .data()
                    .iter()
                    .zip(up.data())
                    .map(|(&xi, &gi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                vec![(*x, Tensor::new(x_val.shape(), data).expect("relu grad"))]
            }
            Op::Sigmoid(x) => {
                let data = node
                    .value
                    .data()
                    .iter()
                    .zip(up.data())
                    .map(|(&s, &gi)| gi * s * (T::one() - s))
                    .collect();
                vec![(*x, Tensor::new(node.value.shape(), data).expect("sigmoid grad"))]
            }
            Op::Add(a, b) => vec![(*a, up.clone()), (*b, up.clone())],
            Op::Mul(a, b) => {
                let ga = up.data().iter().zip(val(*b).data()).map(|(&g, &y)| g * y).collect();
                let gb = up.data().iter().zip(val(*a).data()).map(|(&g, &x)| g * x).collect();
                vec![
                    (*a, Tensor::new(up.shape(), ga).expect("mul grad")),
                    (*b, Tensor::new(up.shape(), gb).expect("mul grad")),
                ]
            }
            Op::MulScalar(x, s) => vec![(*x, up.map(|g| g * *s))],
            Op::Sum(x) => {
                let g = up.data()[0];
                vec![(*x, Tensor::full(val(*x).shape(), g))]
            }
            Op::Upsample2x(x) => vec![(*x, super::shape_ops::upsample2x_backward(val(*x).shape(), up))],
            Op::Reshape(x) => vec![(*x, up.reshape(val(*x).shape()).expect("reshape grad"))],
            Op::Permute { input, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                vec![(*input, super::shape_ops::permute(up, &inverse))]
            }
            Op::Narrow { input, axis, start } => {
                vec![(*input, super::shape_ops::narrow_backward(val(*input).shape(), up, *axis, *start))]
            }
            Op::Concat { inputs, axis } => {
                let shapes: Vec<&[usize]> = inputs.iter().map(|v| val(*v).shape()).collect();
                super::shape_ops::concat_backward(&shapes, up, *axis)
                    .into_iter()
                    .zip(inputs)
                    .map(|(g, v)| (*v, g))
                    .collect()
            }
            Op::BceWithLogits { pred, target, weights, weight_sum } => {
                let g = up.data()[0];
                vec![(*pred, super::loss::bce_backward(val(*pred), target, weights, *weight_sum, g))]
            }
            Op::SmoothL1 { pred, target, weights, beta, weight_sum } => {
                let g = up.data()[0];
                vec![(
                    *pred,
                    super::loss::smooth_l1_backward(val(*pred), target, weights, *beta, *weight_sum, g),
                )]
            }
        }
    }
}
