//! Minimal reverse-mode automatic differentiation over `ndarray`.
//!
//! A [`Graph`] is a tape: operations evaluate eagerly, push their result and a
//! backward rule, and hand back a [`Var`] handle. [`Graph::backward`] walks the
//! tape once in reverse and returns per-leaf gradients. The engine is
//! deliberately small — it implements exactly the operations the models in
//! this crate need — and is generic over `f32`/`f64` so every gradient can be
//! cross-checked against central finite differences in 64-bit.
//!
//! Determinism: all reductions accumulate in index order. Batch-parallel ops
//! split work per sample with disjoint output slices, so results are bitwise
//! identical for any worker count.

mod ops_basic;
mod ops_conv;
mod ops_linalg;
mod ops_shape;

use ndarray::{ArrayD, IxDyn};

use crate::scalar::Scalar;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) trait Backward<F: Scalar>: Send {
    fn backward(&self, out: Var, g: &Graph<F>, grad_out: ArrayD<F>, sink: &mut Gradients<F>);
}

struct Node<F: Scalar> {
    value: ArrayD<F>,
    requires: bool,
    op: Option<Box<dyn Backward<F>>>,
}

/// The tape. One graph per training step / forward evaluation.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

/// Gradients keyed by [`Var`], produced by [`Graph::backward`].
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub(crate) fn add(&mut self, v: Var, contribution: ArrayD<F>) {
        match &mut self.grads[v.0] {
            Some(acc) => {
                ndarray::Zip::from(acc)
                    .and(&contribution)
                    .for_each(|a, &c| *a = *a + c);
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Gradient of the backward root with respect to `v`, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<F>> {
        self.grads[v.0].take()
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(256) }
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, true, None)
    }

    /// Leaf treated as a constant: no gradient flows into it and subgraphs
    /// built purely from constants skip backward entirely.
    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, false, None)
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    /// Scalar payload of a 0-d or single-element node.
    pub fn scalar(&self, v: Var) -> F {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1);
        *val.iter().next().expect("scalar node")
    }

    pub fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(
        &mut self,
        value: ArrayD<F>,
        requires: bool,
        op: Option<Box<dyn Backward<F>>>,
    ) -> Var {
        self.nodes.push(Node { value, requires, op });
        Var(self.nodes.len() - 1)
    }

    /// Pushes an op node; gradient tracking is inherited from the parents.
    pub(crate) fn push_op(
        &mut self,
        value: ArrayD<F>,
        parents: &[Var],
        op: Box<dyn Backward<F>>,
    ) -> Var {
        let requires = parents.iter().any(|p| self.requires(*p));
        if requires {
            self.push(value, true, Some(op))
        } else {
            // Constant subgraph: the backward rule is dropped on the floor.
            self.push(value, false, None)
        }
    }

    /// Reverse pass from a scalar root. Interior gradients are discarded as
    /// soon as they have been propagated; leaf gradients are kept.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(
            self.value(root).len(),
            1,
            "backward root must be a scalar node"
        );
        let mut sink = Gradients {
            grads: (0..self.nodes.len()).map(|_| None).collect(),
        };
        sink.grads[root.0] = Some(ArrayD::ones(self.value(root).raw_dim()));
        for id in (0..=root.0).rev() {
            if sink.grads[id].is_none() || !self.nodes[id].requires {
                continue;
            }
            if let Some(op) = &self.nodes[id].op {
                let gout = sink.grads[id].take().expect("checked above");
                op.backward(Var(id), self, gout, &mut sink);
            }
        }
        sink
    }

    /// Convenience: 0-d scalar constant.
    pub fn lit(&mut self, v: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), F::from_f64(v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn constant_subgraphs_skip_backward() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(arr1(&[1.0, 2.0]).into_dyn());
        let b = g.constant(arr1(&[3.0, 4.0]).into_dyn());
        let c = g.mul(a, b);
        assert!(!g.requires(c));

        let p = g.param(arr1(&[1.0, 1.0]).into_dyn());
        let d = g.add(c, p);
        let s = g.sum_all(d);
        let grads = g.backward(s);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(p).unwrap(), &arr1(&[1.0, 1.0]).into_dyn());
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.param(arr1(&[2.0]).into_dyn());
        let y = g.mul(x, x); // x^2, dy/dx = 2x = 4
        let s = g.sum_all(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap()[0], 4.0);
    }
}
