//! The computation record: an append-only list of applied primitives.
//!
//! Nodes are pushed in execution order, which is a topological order of the
//! graph, so the backward pass is a single reverse sweep. A record is
//! single-threaded while being written; tensors themselves are plain values.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<T: Scalar> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub requires: bool,
    pub op: Op<T>,
}

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Constant,
    AddN(Vec<Var>),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleConst(Var, T),
    Relu(Var),
    Sum(Var),
    Conv2d { x: Var, w: Var, stride: usize, padding: usize },
    DepthwiseConv2d { x: Var, w: Var, stride: usize, padding: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<T>, inv_std: Vec<T>, train: bool },
    L2NormChannels { x: Var, eps: T, norms: Vec<T> },
    MaxSet { x: Var, argmax: Vec<u32> },
    BroadcastSet { x: Var },
    ConcatChannels { xs: Vec<Var> },
    GlobalAvgPool { x: Var },
    UpsampleBilinear { x: Var, factor: usize },
    Linear { x: Var, w: Var, b: Var },
    SoftmaxCrossEntropy { logits: Var, probs: Tensor<T>, targets: Vec<usize> },
    Softmax1d { x: Var, y: Tensor<T> },
    IndexRow { x: Var, row: usize },
    WeightedSum { xs: Vec<Option<Var>>, w: Var },
    CosineLoss { pred: Var, truth: Tensor<T>, mask: Vec<bool>, count: usize },
}

/// Reverse-mode tape over dense tensors.
pub struct Tape<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tracked input: receives a gradient during backward.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Untracked input: no gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Constant)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, requires: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, grad: None, requires, op });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    pub(crate) fn any_requires(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.requires(*v))
    }

    // ---- basic elementwise / reduction primitives ----

    /// Elementwise sum of the given tensors (all same shape).
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("add_n of zero tensors"));
        }
        let shape = self.value(xs[0]).shape().to_vec();
        let mut out = self.value(xs[0]).clone();
        for v in &xs[1..] {
            if self.value(*v).shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "add_n over {:?} and {:?}",
                    shape,
                    self.value(*v).shape()
                )));
            }
            out.add_assign(self.value(*v))?;
        }
        let req = self.any_requires(xs);
        Ok(self.push(out, req, Op::AddN(xs.to_vec())))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_n(&[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let req = self.any_requires(&[a, b]);
        Ok(self.push(out, req, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let req = self.any_requires(&[a, b]);
        Ok(self.push(out, req, Op::Mul(a, b)))
    }

    /// x * c for an untracked constant c.
    pub fn scale_const(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let req = self.requires(x);
        self.push(out, req, Op::ScaleConst(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let req = self.requires(x);
        self.push(out, req, Op::Relu(x))
    }

    /// Sum of all elements, as a 1-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).as_slice().iter().copied().sum();
        let req = self.requires(x);
        self.push(Tensor::scalar(s), req, Op::Sum(x))
    }

    /// Mean of all elements.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale_const(s, T::from_f64(1.0 / n as f64))
    }

    // ---- backward ----

    /// Reverse accumulation from a scalar loss. Fills `grad` on every
    /// tracked node that influences the loss. A tape can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::invalid("backward already ran on this record"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let (before, after) = self.nodes.split_at_mut(i);
            let node = &after[0];
            if !node.requires {
                continue;
            }
            let Some(grad) = node.grad.as_ref() else { continue };
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::AddN(xs) => {
                    for v in xs {
                        acc_ref(before, *v, grad);
                    }
                }
                Op::Sub(a, b) => {
                    acc_ref(before, *a, grad);
                    let neg = grad.map(|g| -g);
                    acc_owned(before, *b, neg);
                }
                Op::Mul(a, b) => {
                    let da = grad.zip_map(&before[b.0].value, |g, vb| g * vb)?;
                    let db = grad.zip_map(&before[a.0].value, |g, va| g * va)?;
                    acc_owned(before, *a, da);
                    acc_owned(before, *b, db);
                }
                Op::ScaleConst(x, c) => {
                    let c = *c;
                    let dx = grad.map(|g| g * c);
                    acc_owned(before, *x, dx);
                }
                Op::Relu(x) => {
                    let dx = grad.zip_map(&node.value, |g, y| if y > T::zero() { g } else { T::zero() })?;
                    acc_owned(before, *x, dx);
                }
                Op::Sum(x) => {
                    let g = grad.item()?;
                    let dx = Tensor::full(before[x.0].value.shape(), g);
                    acc_owned(before, *x, dx);
                }
                Op::Conv2d { x, w, stride, padding } => {
                    super::conv::backward_conv2d(before, *x, *w, *stride, *padding, grad)?;
                }
                Op::DepthwiseConv2d { x, w, stride, padding } => {
                    super::conv::backward_depthwise(before, *x, *w, *stride, *padding, grad)?;
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                    super::norm::backward_batch_norm(before, *x, *gamma, *beta, xhat, inv_std, *train, grad)?;
                }
                Op::L2NormChannels { x, eps, norms } => {
                    super::norm::backward_l2_normalize(before, *x, *eps, norms, &node.value, grad)?;
                }
                Op::MaxSet { x, argmax } => {
                    super::shape_ops::backward_max_set(before, *x, argmax, grad)?;
                }
                Op::BroadcastSet { x } => {
                    super::shape_ops::backward_broadcast_set(before, *x, grad)?;
                }
                Op::ConcatChannels { xs } => {
                    super::shape_ops::backward_concat_channels(before, xs, grad)?;
                }
                Op::GlobalAvgPool { x } => {
                    super::shape_ops::backward_global_avg_pool(before, *x, grad)?;
                }
                Op::UpsampleBilinear { x, factor } => {
                    super::shape_ops::backward_upsample_bilinear(before, *x, *factor, grad)?;
                }
                Op::Linear { x, w, b } => {
                    super::loss_ops::backward_linear(before, *x, *w, *b, grad)?;
                }
                Op::SoftmaxCrossEntropy { logits, probs, targets } => {
                    super::loss_ops::backward_softmax_ce(before, *logits, probs, targets, grad)?;
                }
                Op::Softmax1d { x, y } => {
                    super::loss_ops::backward_softmax_1d(before, *x, y, grad)?;
                }
                Op::IndexRow { x, row } => {
                    super::loss_ops::backward_index_row(before, *x, *row, grad)?;
                }
                Op::WeightedSum { xs, w } => {
                    super::loss_ops::backward_weighted_sum(before, xs, *w, grad)?;
                }
                Op::CosineLoss { pred, truth, mask, count } => {
                    super::loss_ops::backward_cosine_loss(before, *pred, truth, mask, *count, grad)?;
                }
            }
        }
        Ok(())
    }
}

/// Accumulate `delta` into the gradient slot of `v` (skips untracked nodes).
pub(crate) fn acc_owned<T: Scalar>(nodes: &mut [Node<T>], v: Var, delta: Tensor<T>) {
    let n = &mut nodes[v.0];
    if !n.requires {
        return;
    }
    match &mut n.grad {
        Some(g) => g.add_assign(&delta).expect("gradient shape"),
        slot @ None => *slot = Some(delta),
    }
}

pub(crate) fn acc_ref<T: Scalar>(nodes: &mut [Node<T>], v: Var, delta: &Tensor<T>) {
    let n = &mut nodes[v.0];
    if !n.requires {
        return;
    }
    match &mut n.grad {
        Some(g) => g.add_assign(delta).expect("gradient shape"),
        slot @ None => *slot = Some(delta.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().as_slice(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_is_two_x() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().as_slice(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn repeated_backward_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert!(tape.backward(loss).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let c = tape.constant(Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        let p = tape.mul(x, c).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().as_slice(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(Tensor::from_vec(&[4], vec![0.3, -0.7, 1.5, 0.0]).unwrap());
            let r = tape.relu(x);
            let s = tape.mul(r, r).unwrap();
            let loss = tape.mean(s);
            tape.value(loss).item().unwrap()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
