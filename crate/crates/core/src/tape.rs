//! Reverse-mode gradient tape.
//!
//! A [`GradTape`] is rebuilt for every forward pass. Each primitive appends a
//! node holding its output and whatever it needs for the backward pass;
//! [`GradTape::backward`] replays the nodes in reverse record order.

use crate::error::{Error, Result};
use crate::objectives::{self, Reduction};
use crate::ops;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param,
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Conv2d { x: NodeId, k: NodeId, b: Option<NodeId> },
    MaxPool { x: NodeId, argmax: Vec<u32> },
    Relu { x: NodeId },
    Reshape { x: NodeId },
    Softmax { x: NodeId },
    CrossEntropy { probs: NodeId, labels: Vec<usize>, reduction: Reduction },
    CenterLoss { features: NodeId, centers: Tensor, labels: Vec<usize> },
    WeightedSum { terms: Vec<(NodeId, f64)> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    /// Exact value of scalar loss nodes; activations only keep `f32`.
    scalar: Option<f64>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`GradTape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Moves a gradient out; parameters that did not influence the loss get
    /// zeros of `shape`.
    pub fn take_or_zeros(&mut self, id: NodeId, shape: &[usize]) -> Tensor {
        self.grads
            .get_mut(id.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value of a node, at full precision for loss nodes.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let node = &self.nodes[id.0];
        node.scalar.unwrap_or_else(|| node.value.data()[0] as f64)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            scalar: None,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_scalar(&mut self, value: f64, op: Op, needs_grad: bool) -> NodeId {
        let id = self.push(Tensor::scalar(value as f32), op, needs_grad);
        self.nodes[id.0].scalar = Some(value);
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Leaf that never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// Leaf whose gradient is reported by `backward`.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Param, true)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::linear_forward(self.value(x), self.value(w), self.value(b))?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Linear { x, w, b }, needs))
    }

    pub fn conv2d(&mut self, x: NodeId, k: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let out = ops::conv2d_forward(self.value(x), self.value(k), b.map(|b| self.value(b)))?;
        let needs = self.needs(x) || self.needs(k) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Conv2d { x, k, b }, needs))
    }

    pub fn maxpool(&mut self, x: NodeId) -> Result<NodeId> {
        let (out, argmax) = ops::maxpool_forward(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, needs))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = ops::relu_forward(self.value(x));
        let needs = self.needs(x);
        self.push(out, Op::Relu { x }, needs)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Reshape { x }, needs))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let out = ops::softmax_forward(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Softmax { x }, needs))
    }

    pub fn cross_entropy(
        &mut self,
        probs: NodeId,
        labels: &[usize],
        reduction: Reduction,
    ) -> Result<NodeId> {
        let loss = objectives::cross_entropy_with(self.value(probs), labels, reduction)?;
        let needs = self.needs(probs);
        let op = Op::CrossEntropy {
            probs,
            labels: labels.to_vec(),
            reduction,
        };
        Ok(self.push_scalar(loss, op, needs))
    }

    /// `½ Σ ‖h_i − c_{y_i}‖²` with the centers held constant.
    pub fn center_loss(
        &mut self,
        features: NodeId,
        centers: &Tensor,
        labels: &[usize],
    ) -> Result<NodeId> {
        let loss = objectives::center_loss_raw(self.value(features), labels, centers)?;
        let needs = self.needs(features);
        let op = Op::CenterLoss {
            features,
            centers: centers.clone(),
            labels: labels.to_vec(),
        };
        Ok(self.push_scalar(loss, op, needs))
    }

    /// `Σ w_k · s_k` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        if terms.is_empty() {
            return Err(Error::Usage("weighted_sum needs at least one term".into()));
        }
        let mut total = 0.0;
        for &(id, w) in terms {
            if self.value(id).numel() != 1 {
                return Err(Error::shape(
                    "weighted_sum",
                    format!("term {:?} is not scalar", self.value(id).shape()),
                ));
            }
            total += w * self.scalar(id);
        }
        let needs = terms.iter().any(|&(id, _)| self.needs(id));
        Ok(self.push_scalar(total, Op::WeightedSum { terms: terms.to_vec() }, needs))
    }

    /// Reverse pass from a scalar node, seeded with `d loss / d loss = 1`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::Usage(
                "backward called before any forward pass was recorded".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar terminal node, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param => {
                    grads[idx] = Some(upstream);
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = ops::linear_backward(
                        self.value(*x),
                        self.value(*w),
                        &upstream,
                        self.needs(*x),
                    )?;
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::Conv2d { x, k, b } => {
                    let (dx, dk, db) = ops::conv2d_backward(
                        self.value(*x),
                        self.value(*k),
                        &upstream,
                        self.needs(*x),
                    )?;
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    accumulate(&mut grads, *k, dk);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let dx = ops::maxpool_backward(self.value(*x).shape(), argmax, &upstream)?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::Relu { x } => {
                    accumulate(&mut grads, *x, ops::relu_backward(self.value(*x), &upstream));
                }
                Op::Reshape { x } => {
                    let dx = upstream.reshape(self.value(*x).shape())?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::Softmax { x } => {
                    let dz = ops::softmax_backward(&node.value, &upstream);
                    accumulate(&mut grads, *x, dz);
                }
                Op::CrossEntropy {
                    probs,
                    labels,
                    reduction,
                } => {
                    let seed = upstream.data()[0] as f64;
                    let dp = objectives::cross_entropy_grad(self.value(*probs), labels, *reduction, seed);
                    accumulate(&mut grads, *probs, dp);
                }
                Op::CenterLoss {
                    features,
                    centers,
                    labels,
                } => {
                    let seed = upstream.data()[0] as f64;
                    let dh = objectives::center_loss_grad(self.value(*features), labels, centers, seed);
                    accumulate(&mut grads, *features, dh);
                }
                Op::WeightedSum { terms } => {
                    let seed = upstream.data()[0];
                    for &(id, w) in terms {
                        if self.needs(id) {
                            accumulate(&mut grads, id, Tensor::scalar((w * seed as f64) as f32));
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
