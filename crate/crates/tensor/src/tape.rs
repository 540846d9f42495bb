//! Reverse-mode differentiation tape.
//!
//! Every operation appends one node holding its output value and a backward
//! closure. Nodes are only ever appended, so the node order is a topological
//! order and `backward` can sweep it once in reverse.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&[f64], &mut BackwardCtx<'_>)>;

struct Node {
    op: &'static str,
    value: Tensor,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// View handed to backward rules: read access to recorded values and
/// accumulate-only access to input gradients.
pub struct BackwardCtx<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl<'a> BackwardCtx<'a> {
    pub fn value(&self, v: Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }

    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient buffer for `v`, allocated as zeros on first use. `None` when
    /// `v` does not participate in differentiation.
    pub fn grad_mut(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    pub fn accumulate(&mut self, v: Var, g: &[f64]) {
        if let Some(dst) = self.grad_mut(v) {
            debug_assert_eq!(dst.len(), g.len());
            dst.iter_mut().zip(g).for_each(|(d, s)| *d += s);
        }
    }
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of `len` if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; len])
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Records an input. Gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        let requires_grad = t.requires_grad;
        t.grad = None;
        self.nodes.push(Node { op: "leaf", value: t, requires_grad, backward: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    /// Id the next recorded node will receive.
    pub(crate) fn next_var(&self) -> Var {
        Var(self.nodes.len())
    }

    pub(crate) fn push(
        &mut self,
        op: &'static str,
        value: Tensor,
        inputs: &[Var],
        backward: impl Fn(&[f64], &mut BackwardCtx<'_>) + 'static,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let backward: Option<BackwardFn> =
            if requires_grad { Some(Box::new(backward)) } else { None };
        self.nodes.push(Node { op, value, requires_grad, backward });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Backpropagates from a scalar `loss`. Intermediate gradients are
    /// released as soon as they have been propagated; leaf gradients are
    /// returned.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let out = &self.nodes[loss.0].value;
        if out.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(rule) = &self.nodes[i].backward else { continue };
            let Some(g) = grads[i].take() else { continue };
            let mut ctx = BackwardCtx { nodes: &self.nodes, grads: &mut grads };
            rule(&g, &mut ctx);
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]).with_grad());
        assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[3]).with_grad());
        let c = tape.constant(Tensor::full(&[3], 2.0));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 2.0, 2.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap().with_grad());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn gradient_of_sum_of_squares_is_twice_input() {
        let mut tape = Tape::new();
        let vals = vec![1.0, -2.0, 3.0, 0.5];
        let x = tape.leaf(Tensor::new(&[4], vals.clone()).unwrap().with_grad());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        let expected: Vec<f64> = vals.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.get(x).unwrap(), expected.as_slice());
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1], -1.0));
        assert!(matches!(tape.log(x), Err(TensorError::NonFinite { op: "log" })));
    }
}
