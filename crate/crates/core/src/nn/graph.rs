//! Recorded forward pass with reverse-mode differentiation.
//!
//! A [`Graph`] borrows a [`ParamStore`], appends one node per operation and keeps every
//! intermediate value until [`Graph::backward`] walks the nodes in reverse.

use super::ops::{self, Padding, SparseBatch};
use super::param::{ParamId, ParamStore};
use super::tensor::{debug_check_finite, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Conv2d {
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
        stride: usize,
        padding: Padding,
    },
    SparseConv2d {
        input: SparseBatch<T>,
        w: ParamId,
        b: Option<ParamId>,
        stride: usize,
        padding: Padding,
    },
    Depthwise {
        x: NodeId,
        w: ParamId,
        stride: usize,
        padding: Padding,
    },
    Relu {
        x: NodeId,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<u32>,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    Dense {
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    /// One tensor per parameter, in store order.
    pub params: Vec<Tensor<T>>,
    inputs: Vec<(NodeId, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a dense input node, if it received any.
    pub fn input(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.inputs.iter().find(|(n, _)| *n == id).map(|(_, t)| t)
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        debug_check_finite(&value, "layer output");
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn w(&self, id: ParamId) -> &'p Tensor<T> {
        self.params.weights(id)
    }

    pub fn input(&mut self, x: Tensor<T>) -> NodeId {
        self.push(Op::Input, x)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let y = ops::conv2d_forward(self.value(x), self.w(w), b.map(|b| self.w(b)), stride, padding)?;
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
            y,
        ))
    }

    pub fn sparse_conv2d(
        &mut self,
        input: SparseBatch<T>,
        w: ParamId,
        b: Option<ParamId>,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let y = ops::sparse_conv2d_forward(&input, self.w(w), b.map(|b| self.w(b)), stride, padding)?;
        Ok(self.push(
            Op::SparseConv2d {
                input,
                w,
                b,
                stride,
                padding,
            },
            y,
        ))
    }

    pub fn depthwise(&mut self, x: NodeId, w: ParamId, stride: usize, padding: Padding) -> Result<NodeId> {
        let y = ops::depthwise_conv2d_forward(self.value(x), self.w(w), stride, padding)?;
        Ok(self.push(
            Op::Depthwise {
                x,
                w,
                stride,
                padding,
            },
            y,
        ))
    }

    /// Depthwise then pointwise convolution, bias on the pointwise stage.
    pub fn separable_conv2d(
        &mut self,
        x: NodeId,
        depthwise_w: ParamId,
        pointwise_w: ParamId,
        b: Option<ParamId>,
    ) -> Result<NodeId> {
        let mid = self.depthwise(x, depthwise_w, 1, Padding::Same)?;
        self.conv2d(mid, pointwise_w, b, 1, Padding::Same)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = ops::relu(self.value(x));
        self.push(Op::Relu { x }, y)
    }

    pub fn maxpool(&mut self, x: NodeId, k: usize, stride: usize) -> Result<NodeId> {
        let (y, argmax) = ops::maxpool2d_forward(self.value(x), k, stride, Padding::Same)?;
        Ok(self.push(Op::MaxPool { x, argmax }, y))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let y = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(Op::GlobalAvgPool { x }, y))
    }

    pub fn dense(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>) -> Result<NodeId> {
        let y = ops::dense_forward(self.value(x), self.w(w), b.map(|b| self.w(b)))?;
        Ok(self.push(Op::Dense { x, w, b }, y))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = ops::residual_add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add { a, b }, y))
    }

    /// Propagates `upstream` (the gradient of the loss at `output`) back to every parameter
    /// and dense input.
    pub fn backward(&self, output: NodeId, upstream: &Tensor<T>) -> Result<Gradients<T>> {
        if output.0 >= self.nodes.len() {
            return Err(Error::NoForward);
        }
        if upstream.shape() != self.value(output).shape() {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match output {:?}",
                upstream.shape(),
                self.value(output).shape()
            )));
        }
        let mut node_grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        node_grads[output.0] = Some(upstream.clone());
        let mut param_grads: Vec<Option<Tensor<T>>> = vec![None; self.params.len()];
        let mut inputs = Vec::new();

        fn give<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
            match slot {
                Some(acc) => acc.add_assign(&g),
                None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(dy) = node_grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => inputs.push((NodeId(idx), dy)),
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    padding,
                } => {
                    let (dx, dw, db) =
                        ops::conv2d_backward(self.value(*x), self.w(*w), &dy, *stride, *padding, true)?;
                    give(&mut node_grads[x.0], dx.expect("requested"))?;
                    give(&mut param_grads[w.0], dw)?;
                    if let Some(b) = b {
                        give(&mut param_grads[b.0], db)?;
                    }
                }
                Op::SparseConv2d {
                    input,
                    w,
                    b,
                    stride,
                    padding,
                } => {
                    let (dw, db) = ops::sparse_conv2d_backward(input, self.w(*w), &dy, *stride, *padding)?;
                    give(&mut param_grads[w.0], dw)?;
                    if let Some(b) = b {
                        give(&mut param_grads[b.0], db)?;
                    }
                }
                Op::Depthwise {
                    x,
                    w,
                    stride,
                    padding,
                } => {
                    let (dx, dw) =
                        ops::depthwise_conv2d_backward(self.value(*x), self.w(*w), &dy, *stride, *padding)?;
                    give(&mut node_grads[x.0], dx)?;
                    give(&mut param_grads[w.0], dw)?;
                }
                Op::Relu { x } => {
                    give(&mut node_grads[x.0], ops::relu_backward(&node.value, &dy)?)?;
                }
                Op::MaxPool { x, argmax } => {
                    let dx = ops::maxpool2d_backward(self.value(*x).shape(), argmax, &dy)?;
                    give(&mut node_grads[x.0], dx)?;
                }
                Op::GlobalAvgPool { x } => {
                    let dx = ops::global_avg_pool_backward(self.value(*x).shape(), &dy)?;
                    give(&mut node_grads[x.0], dx)?;
                }
                Op::Dense { x, w, b } => {
                    let (dx, dw, db) = ops::dense_backward(self.value(*x), self.w(*w), &dy)?;
                    give(&mut node_grads[x.0], dx)?;
                    give(&mut param_grads[w.0], dw)?;
                    if let Some(b) = b {
                        give(&mut param_grads[b.0], db)?;
                    }
                }
                Op::Add { a, b } => {
                    give(&mut node_grads[b.0], dy.clone())?;
                    give(&mut node_grads[a.0], dy)?;
                }
            }
        }

        let params = param_grads
            .into_iter()
            .zip(self.params.params())
            .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.weights.shape())))
            .collect();
        Ok(Gradients { params, inputs })
    }
}
