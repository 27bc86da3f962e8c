//! Shape-manipulation operations: reshape, permute, narrow, concatenate.

use ndarray::{ArrayD, Axis, IxDyn, Slice};

use super::{Backward, Gradients, Graph, Var};
use crate::scalar::Scalar;

struct Reshape {
    x: Var,
    in_shape: Vec<usize>,
}

impl<F: Scalar> Backward<F> for Reshape {
    fn backward(&self, _out: Var, g: &Graph<F>, grad_out: ArrayD<F>, sink: &mut Gradients<F>) {
        if !g.requires(self.x) {
            return;
        }
        let gx = grad_out
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(&self.in_shape))
            .expect("reshape backward");
        sink.add(self.x, gx);
    }
}

struct Permute {
    x: Var,
    axes: Vec<usize>,
}

impl<F: Scalar> Backward<F> for Permute {
    fn backward(&self, _out: Var, g: &Graph<F>, grad_out: ArrayD<F>, sink: &mut Gradients<F>) {
        if !g.requires(self.x) {
            return;
        }
        let mut inverse = vec![0usize; self.axes.len()];
        for (i, &a) in self.axes.iter().enumerate() {
            inverse[a] = i;
        }
        let gx = grad_out
            .view()
            .permuted_axes(IxDyn(&inverse))
            .as_standard_layout()
            .to_owned();
        sink.add(self.x, gx);
    }
}

struct Narrow {
    x: Var,
    axis: usize,
    start: usize,
    len: usize,
}

impl<F: Scalar> Backward<F> for Narrow {
    fn backward(&self, _out: Var, g: &Graph<F>, grad_out: ArrayD<F>, sink: &mut Gradients<F>) {
        if !g.requires(self.x) {
            return;
        }
        let mut gx = ArrayD::<F>::zeros(g.value(self.x).raw_dim());
        gx.slice_axis_mut(
            Axis(self.axis),
            Slice::from(self.start..self.start + self.len),
        )
        .assign(&grad_out);
        sink.add(self.x, gx);
    }
}

struct Concat2 {
    a: Var,
    b: Var,
    axis: usize,
    split: usize,
}

impl<F: Scalar> Backward<F> for Concat2 {
    fn backward(&self, _out: Var, g: &Graph<F>, grad_out: ArrayD<F>, sink: &mut Gradients<F>) {
        let total = grad_out.shape()[self.axis];
        if g.requires(self.a) {
            let ga = grad_out
                .slice_axis(Axis(self.axis), Slice::from(0..self.split))
                .to_owned();
            sink.add(self.a, ga);
        }
        if g.requires(self.b) {
            let gb = grad_out
                .slice_axis(Axis(self.axis), Slice::from(self.split..total))
                .to_owned();
            sink.add(self.b, gb);
        }
    }
}

impl<F: Scalar> Graph<F> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let in_shape = self.value(x).shape().to_vec();
        let v = self
            .value(x)
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element counts must match");
        self.push_op(v, &[x], Box::new(Reshape { x, in_shape }))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let v = self
            .value(x)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        self.push_op(
            v,
            &[x],
            Box::new(Permute {
                x,
                axes: axes.to_vec(),
            }),
        )
    }

    /// Contiguous slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self
            .value(x)
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.push_op(v, &[x], Box::new(Narrow { x, axis, start, len }))
    }

    pub fn concat2(&mut self, a: Var, b: Var, axis: usize) -> Var {
        let split = self.value(a).shape()[axis];
        let v = ndarray::concatenate(Axis(axis), &[self.value(a).view(), self.value(b).view()])
            .expect("concat: shapes must agree off-axis");
        self.push_op(v, &[a, b], Box::new(Concat2 { a, b, axis, split }))
    }
}
