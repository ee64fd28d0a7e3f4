use super::ops::Op;
use super::{Real, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) inputs: Vec<Var>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Tensor<T>>,
}

/// Record of executed primitives in execution order.
///
/// A graph is built fresh for every forward pass and supports exactly one
/// call to [`Graph::backward`]. Leaves registered with [`Graph::leaf`] receive
/// gradients; constants never do.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    backpropagated: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backpropagated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.insert(value, Op::Leaf, Vec::new(), true)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.insert(value, Op::Leaf, Vec::new(), false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    fn insert(&mut self, value: Tensor<T>, op: Op<T>, inputs: Vec<Var>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Appends the output of a primitive. Rejects non-finite outputs.
    pub(crate) fn record(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: Vec<Var>,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Saved state is dead weight when no gradient will flow through the node.
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.insert(value, op, inputs, requires_grad))
    }

    /// Propagates `d loss / d node` to every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backpropagated {
            return Err(TensorError::AlreadyBackpropagated);
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        self.backpropagated = true;
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::ones(loss_value.shape()));
        let mut leaf_grads = Vec::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if node.inputs.is_empty() {
                leaf_grads.push((i, g));
                continue;
            }
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = node.op.backward(&inputs, &node.value, &g, &needs)?;
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((v, gi), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let Some(gi) = gi else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(gi.shape(), self.nodes[v.0].value.shape());
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        for (i, g) in leaf_grads {
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }
}
