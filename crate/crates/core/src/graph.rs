//! Reverse-mode differentiation over a recorded operation graph.
//!
//! Operations push nodes in execution order, which is already a topological
//! order, so the backward pass is a single reverse sweep that visits each
//! node exactly once. Gradients accumulate into per-node slots and persist
//! across `backward` calls until [`Graph::zero_grads`].
//!
//! Every forward value and every produced gradient is checked for NaN/Inf;
//! a non-finite result is an error, never a silent propagation.

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Everything a backward rule may need: the upstream gradient plus the
/// recorded input and output values of the op.
pub(crate) struct BackwardCtx<'a, T: Scalar> {
    pub grad_out: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
}

/// Vector-Jacobian product of one recorded op. Returns one optional gradient
/// per input, in input order; `None` marks an input that needs no gradient.
pub(crate) trait GradFn<T: Scalar>: Send {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>>;
}

struct Node<T: Scalar> {
    op: &'static str,
    value: Tensor<T>,
    inputs: Vec<Var>,
    grad_fn: Option<Box<dyn GradFn<T>>>,
    requires_grad: bool,
}

/// Recorded forward pass: values plus enough structure to replay backward.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts an input tensor. Only leaves may require gradients directly.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(CoreError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            op: "leaf",
            value,
            inputs: Vec::new(),
            grad_fn: None,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Inserts a non-differentiable constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Records an op result. The grad fn is kept only when some input
    /// requires a gradient.
    pub(crate) fn push(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        inputs: Vec<Var>,
        grad_fn: Box<dyn GradFn<T>>,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(CoreError::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            inputs,
            grad_fn: if requires_grad { Some(grad_fn) } else { None },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// True when any of the given vars participates in differentiation.
    /// Lets fused ops skip saving intermediates on inference-only passes.
    pub fn wants_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    #[inline]
    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    #[inline]
    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Accumulated gradient of `var`, if any backward pass reached it.
    pub fn grad(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn zero_grads(&mut self) {
        self.grads.clear();
    }

    /// Reverse sweep from a scalar root. Each reachable node is visited once,
    /// in reverse topological (= reverse insertion) order, and every leaf
    /// with `requires_grad` ends up holding dRoot/dLeaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_node = &self.nodes[root.0];
        if !root_node.value.is_scalar() {
            return Err(CoreError::NonScalarRoot {
                shape: root_node.value.shape().to_vec(),
            });
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize(self.nodes.len(), None);
        }

        // Local slots for this sweep keep reachability separate from grads
        // accumulated by earlier backward calls.
        let mut sweep: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        sweep[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), T::one()));

        for i in (0..=root.0).rev() {
            let Some(grad_out) = sweep[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if node.requires_grad {
                if let Some(grad_fn) = &node.grad_fn {
                    let ctx = BackwardCtx {
                        grad_out: &grad_out,
                        inputs: node
                            .inputs
                            .iter()
                            .map(|v| &self.nodes[v.0].value)
                            .collect(),
                        output: &node.value,
                    };
                    let input_grads = grad_fn.backward(&ctx)?;
                    debug_assert_eq!(input_grads.len(), node.inputs.len());
                    for (slot, grad) in node.inputs.iter().zip(input_grads) {
                        let Some(grad) = grad else { continue };
                        if !self.nodes[slot.0].requires_grad {
                            continue;
                        }
                        if !grad.all_finite() {
                            return Err(CoreError::NonFinite { op: node.op });
                        }
                        if grad.shape() != self.nodes[slot.0].value.shape() {
                            return Err(CoreError::ShapeMismatch {
                                op: node.op,
                                lhs: grad.shape().to_vec(),
                                rhs: self.nodes[slot.0].value.shape().to_vec(),
                            });
                        }
                        accumulate(&mut sweep[slot.0], &grad);
                    }
                }
            }
            // Leaves (and any node the caller may query) keep their gradient.
            accumulate(&mut self.grads[i], &grad_out);
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, grad: &Tensor<T>) {
    match slot {
        Some(existing) => {
            let dst = existing.as_mut_slice();
            for (d, s) in dst.iter_mut().zip(grad.as_slice()) {
                *d = *d + *s;
            }
        }
        None => *slot = Some(grad.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::<f64>::new();
        let x = g
            .leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap(), true)
            .unwrap();
        assert!(matches!(
            g.backward(x),
            Err(CoreError::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g
            .leaf(Tensor::from_vec(vec![2, 2], vec![3.0, -1.0, 0.5, 2.0]).unwrap(), true)
            .unwrap();
        let s = ops::sum_all(&mut g, x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().as_slice(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_gradient_is_two_x() {
        let mut g = Graph::<f64>::new();
        let x = g
            .leaf(Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true)
            .unwrap();
        let sq = ops::mul(&mut g, x, x).unwrap();
        let s = ops::sum_all(&mut g, sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().as_slice(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn grads_accumulate_across_backward_calls() {
        let mut g = Graph::<f64>::new();
        let x = g
            .leaf(Tensor::from_vec(vec![2], vec![1.0, 1.0]).unwrap(), true)
            .unwrap();
        let s = ops::sum_all(&mut g, x).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().as_slice(), &[2.0, 2.0]);
        g.zero_grads();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::<f32>::new();
        let err = g.leaf(Tensor::from_vec(vec![1], vec![f32::NAN]).unwrap(), false);
        assert!(matches!(err, Err(CoreError::NonFinite { .. })));
    }
}
