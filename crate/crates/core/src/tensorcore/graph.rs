//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is a topological
//! order by construction and `backward` simply walks it in reverse.

use super::conv::{self, ConvGeometry};
use super::tensor::{softmax_channels, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation that produced a node.
#[derive(Debug)]
pub enum Op<T: Real> {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        padding: usize,
        cols: Vec<T>,
    },
    Relu(NodeId),
    SoftmaxChannels(NodeId),
    /// Per-pixel `-log softmax(logits)_y`; caches the probabilities.
    PixelCrossEntropy {
        logits: NodeId,
        labels: Vec<u16>,
        probs: Tensor<T>,
    },
    /// `sum_i weights_i * input_i` with constant weights.
    WeightedSum {
        input: NodeId,
        weights: Tensor<T>,
    },
    Sum(NodeId),
    Mean(NodeId),
    Square(NodeId),
    #[cfg(test)]
    BrokenSquare(NodeId),
}

impl<T: Real> Op<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::SoftmaxChannels(_) => "softmax_channels",
            Op::PixelCrossEntropy { .. } => "pixel_cross_entropy",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Square(_) => "square",
            #[cfg(test)]
            Op::BrokenSquare(_) => "broken_square",
        }
    }

    pub fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, kernel, bias, ..
            } => vec![*input, *kernel, *bias],
            Op::Relu(a) | Op::SoftmaxChannels(a) | Op::Sum(a) | Op::Mean(a) | Op::Square(a) => {
                vec![*a]
            }
            Op::PixelCrossEntropy { logits, .. } => vec![*logits],
            Op::WeightedSum { input, .. } => vec![*input],
            #[cfg(test)]
            Op::BrokenSquare(a) => vec![*a],
        }
    }
}

#[derive(Debug)]
pub struct GraphNode<T: Real> {
    pub op: Op<T>,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    requires_grad: bool,
}

/// A single-use computation graph. Not shared between threads; build one per
/// sample and drop it after `backward`.
#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<GraphNode<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &GraphNode<T> {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Removes the gradient of a node, leaving `None` behind.
    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.nodes[id.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Adds an input. Gradients are only propagated into subgraphs that reach
    /// a leaf with `requires_grad` set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(GraphNode {
            op: Op::Leaf,
            value,
            grad: None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.kind().to_string()));
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(GraphNode {
            op,
            value,
            grad: None,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId, padding: usize) -> Result<NodeId> {
        let geo = ConvGeometry::new(self.value(input), self.value(kernel), self.value(bias), padding)?;
        let (out, cols) = conv::forward(&geo, self.value(input), self.value(kernel), self.value(bias));
        self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                padding,
                cols,
            },
            out,
        )
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let out = self.value(input).map(|v| v.max(T::zero()));
        self.push(Op::Relu(input), out)
    }

    pub fn softmax_channels(&mut self, logits: NodeId) -> Result<NodeId> {
        let out = softmax_channels(self.value(logits))?;
        self.push(Op::SoftmaxChannels(logits), out)
    }

    /// Unreduced per-pixel cross-entropy, `[M, H, W]` logits to `[H, W]`.
    pub fn pixel_cross_entropy(&mut self, logits: NodeId, labels: &[u16]) -> Result<NodeId> {
        let (m, h, w) = self.value(logits).dims3()?;
        if labels.len() != h * w {
            return Err(Error::shape(
                "pixel_cross_entropy",
                format!("{} labels for a {h}x{w} map", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= m) {
            return Err(Error::Input(format!("label {bad} out of range for {m} classes")));
        }
        let plane = h * w;
        let z = self.value(logits).data();
        let mut loss = Vec::with_capacity(plane);
        for (p, &y) in labels.iter().enumerate() {
            let mut max = z[p];
            for c in 1..m {
                max = max.max(z[c * plane + p]);
            }
            let mut total = T::zero();
            for c in 0..m {
                total = total + (z[c * plane + p] - max).exp();
            }
            loss.push(total.ln() + max - z[y as usize * plane + p]);
        }
        let probs = softmax_channels(self.value(logits))?;
        let out = Tensor::new(vec![h, w], loss)?;
        self.push(
            Op::PixelCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            out,
        )
    }

    pub fn weighted_sum(&mut self, input: NodeId, weights: Tensor<T>) -> Result<NodeId> {
        let v = self.value(input);
        if v.shape() != weights.shape() {
            return Err(Error::shape(
                "weighted_sum",
                format!("input {:?} vs weights {:?}", v.shape(), weights.shape()),
            ));
        }
        let total = v
            .data()
            .iter()
            .zip(weights.data())
            .fold(T::zero(), |a, (&x, &w)| a + x * w);
        self.push(Op::WeightedSum { input, weights }, Tensor::scalar(total))
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.value(input).sum();
        self.push(Op::Sum(input), Tensor::scalar(s))
    }

    pub fn mean(&mut self, input: NodeId) -> Result<NodeId> {
        let v = self.value(input);
        let s = v.sum() / T::from_f64(v.len() as f64);
        self.push(Op::Mean(input), Tensor::scalar(s))
    }

    pub fn square(&mut self, input: NodeId) -> Result<NodeId> {
        let out = self.value(input).map(|v| v * v);
        self.push(Op::Square(input), out)
    }

    #[cfg(test)]
    pub(crate) fn broken_square(&mut self, input: NodeId) -> Result<NodeId> {
        let out = self.value(input).map(|v| v * v);
        self.push(Op::BrokenSquare(input), out)
    }

    fn accumulate(&mut self, id: NodeId, g: Vec<T>) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
            None => {
                node.grad = Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"));
            }
        }
    }

    /// Reverse-mode sweep from a scalar root. Gradients accumulate into
    /// existing buffers; call [`Graph::zero_grad`] between sweeps.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        self.accumulate(root, vec![T::one()]);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.propagate(idx, &grad)?;
            self.nodes[idx].grad = Some(grad);
        }
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&mut self, idx: usize, grad: &Tensor<T>) -> Result<()> {
        let g = grad.data();
        let mut pending: Vec<(NodeId, Vec<T>)> = Vec::new();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                padding,
                cols,
            } => {
                let geo = ConvGeometry::new(self.value(*input), self.value(*kernel), self.value(*bias), *padding)?;
                let want = (self.wants(*input), self.wants(*kernel), self.wants(*bias));
                let grads = conv::backward(&geo, self.value(*kernel), cols, g, want);
                // kernel and bias first, input last: fixed order
                if let Some(dk) = grads.kernel {
                    pending.push((*kernel, dk));
                }
                if let Some(db) = grads.bias {
                    pending.push((*bias, db));
                }
                if let Some(dx) = grads.input {
                    pending.push((*input, dx));
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = x
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                pending.push((*a, d));
            }
            Op::SoftmaxChannels(a) => {
                let s = &self.nodes[idx].value;
                let (m, h, w) = s.dims3()?;
                let plane = h * w;
                let s = s.data();
                let mut d = vec![T::zero(); s.len()];
                for p in 0..plane {
                    let mut dot = T::zero();
                    for c in 0..m {
                        dot = dot + g[c * plane + p] * s[c * plane + p];
                    }
                    for c in 0..m {
                        let i = c * plane + p;
                        d[i] = s[i] * (g[i] - dot);
                    }
                }
                pending.push((*a, d));
            }
            Op::PixelCrossEntropy { logits, labels, probs } => {
                let (m, h, w) = probs.dims3()?;
                let plane = h * w;
                let pr = probs.data();
                let mut d = vec![T::zero(); pr.len()];
                for (p, &y) in labels.iter().enumerate() {
                    for c in 0..m {
                        let i = c * plane + p;
                        let onehot = if c == y as usize { T::one() } else { T::zero() };
                        d[i] = g[p] * (pr[i] - onehot);
                    }
                }
                pending.push((*logits, d));
            }
            Op::WeightedSum { input, weights } => {
                let d = weights.data().iter().map(|&w| w * g[0]).collect();
                pending.push((*input, d));
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                pending.push((*a, vec![g[0]; n]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                pending.push((*a, vec![g[0] / T::from_f64(n as f64); n]));
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                let two = T::from_f64(2.0);
                pending.push((*a, x.iter().zip(g).map(|(&x, &g)| two * x * g).collect()));
            }
            #[cfg(test)]
            Op::BrokenSquare(a) => {
                // derivative of x^2 deliberately written as x
                let x = self.value(*a).data();
                pending.push((*a, x.iter().zip(g).map(|(&x, &g)| x * g).collect()));
            }
        }
        for (id, d) in pending {
            self.accumulate(id, d);
        }
        Ok(())
    }
}
