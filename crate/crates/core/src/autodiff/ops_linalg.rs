//! Dense and batched matrix products.

use ndarray::linalg::general_mat_mul;
use ndarray::parallel::prelude::*;
use ndarray::{Array2, Array3, ArrayD, ArrayView2, ArrayView3, Axis};

use super::{Backward, Gradients, Graph, Var};
use crate::scalar::Scalar;

fn as2<F: Scalar>(a: &ArrayD<F>) -> ArrayView2<'_, F> {
    a.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("matmul operand must be rank 2")
}

fn as3<F: Scalar>(a: &ArrayD<F>) -> ArrayView3<'_, F> {
    a.view()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("bmm operand must be rank 3")
}

/// `op(A) · op(B)` with optional transposes.
pub(crate) fn mm<F: Scalar>(a: ArrayView2<F>, ta: bool, b: ArrayView2<F>, tb: bool) -> Array2<F> {
    let av = if ta { a.t() } else { a.view() };
    let bv = if tb { b.t() } else { b.view() };
    let mut c = Array2::<F>::zeros((av.nrows(), bv.ncols()));
    general_mat_mul(F::one(), &av, &bv, F::zero(), &mut c);
    c
}

fn transpose2<F: Scalar>(a: Array2<F>) -> Array2<F> {
    a.t().as_standard_layout().to_owned()
}

struct MatMul {
    a: Var,
    b: Var,
    ta: bool,
    tb: bool,
}

// With A' = op(a), B' = op(b) and y = A'·B':
//   dA' = gy · B'^T,  dB' = A'^T · gy,
// and the gradient of the untransposed operand is the transpose of the primed
// gradient whenever the forward applied a transpose.
impl<F: Scalar> Backward<F> for MatMul {
    fn backward(&self, _out: Var, g: &Graph<F>, grad_out: ArrayD<F>, sink: &mut Gradients<F>) {
        let gy = grad_out
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matmul grad rank 2");
        let a = as2(g.value(self.a));
        let b = as2(g.value(self.b));
        let ap = if self.ta { a.t() } else { a.view() };
        let bp = if self.tb { b.t() } else { b.view() };
        if g.requires(self.a) {
            let mut ga = mm(gy.view(), false, bp.view(), true);
            if self.ta {
                ga = transpose2(ga);
            }
            sink.add(self.a, ga.into_dyn());
        }
        if g.requires(self.b) {
            let mut gb = mm(ap.view(), true, gy.view(), false);
            if self.tb {
                gb = transpose2(gb);
            }
            sink.add(self.b, gb.into_dyn());
        }
    }
}

fn bmm<F: Scalar>(a: ArrayView3<F>, ta: bool, b: ArrayView3<F>, tb: bool) -> Array3<F> {
    let n = a.shape()[0];
    assert_eq!(n, b.shape()[0], "bmm batch sizes must match");
    let m = if ta { a.shape()[2] } else { a.shape()[1] };
    let k = if tb { b.shape()[1] } else { b.shape()[2] };
    let mut out = Array3::<F>::zeros((n, m, k));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut o)| {
            let ai = a.index_axis(Axis(0), i);
            let bi = b.index_axis(Axis(0), i);
            let av = if ta { ai.t() } else { ai.view() };
            let bv = if tb { bi.t() } else { bi.view() };
            general_mat_mul(F::one(), &av, &bv, F::zero(), &mut o);
        });
    out
}

fn transpose3<F: Scalar>(a: Array3<F>) -> Array3<F> {
    a.view()
        .permuted_axes([0, 2, 1])
        .as_standard_layout()
        .to_owned()
}

struct BatchMatMul {
    a: Var,
    b: Var,
    ta: bool,
    tb: bool,
}

impl<F: Scalar> Backward<F> for BatchMatMul {
    fn backward(&self, _out: Var, g: &Graph<F>, grad_out: ArrayD<F>, sink: &mut Gradients<F>) {
        let gy = as3(&grad_out);
        let a = as3(g.value(self.a));
        let b = as3(g.value(self.b));
        if g.requires(self.a) {
            // dA' = gy · B'^T, where B' = op(b); pass transposes through bmm.
            let ga = bmm(gy.view(), false, b.view(), !self.tb);
            let ga = if self.ta { transpose3(ga) } else { ga };
            sink.add(self.a, ga.into_dyn());
        }
        if g.requires(self.b) {
            // dB' = A'^T · gy
            let gb = bmm(a.view(), !self.ta, gy.view(), false);
            let gb = if self.tb { transpose3(gb) } else { gb };
            sink.add(self.b, gb.into_dyn());
        }
    }
}

impl<F: Scalar> Graph<F> {
    /// `op(a) · op(b)` for rank-2 operands.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let v = mm(as2(self.value(a)), ta, as2(self.value(b)), tb).into_dyn();
        self.push_op(v, &[a, b], Box::new(MatMul { a, b, ta, tb }))
    }

    /// Per-batch `op(a[i]) · op(b[i])` for rank-3 operands `[N, ·, ·]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let v = bmm(as3(self.value(a)), ta, as3(self.value(b)), tb).into_dyn();
        self.push_op(v, &[a, b], Box::new(BatchMatMul { a, b, ta, tb }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn matmul_backward_matches_manual() {
        // C = A·B, L = sum(C): dA = 1·B^T, dB = A^T·1.
        let mut g: Graph<f64> = Graph::new();
        let a = g.param(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = g.param(arr2(&[[5.0, 6.0], [7.0, 8.0]]).into_dyn());
        let c = g.matmul(a, b, false, false);
        let s = g.sum_all(c);
        let grads = g.backward(s);
        let ga = grads.get(a).unwrap();
        assert_eq!(ga[[0, 0]], 11.0); // b row sums
        assert_eq!(ga[[0, 1]], 15.0);
        let gb = grads.get(b).unwrap();
        assert_eq!(gb[[0, 0]], 4.0); // a column sums
        assert_eq!(gb[[1, 1]], 6.0);
    }

    #[test]
    fn bmm_backward_note() {
        // dA' = gy·B'^T: for y = A·B^T, dA = gy·B.
        let mut g: Graph<f64> = Graph::new();
        let a = g.param(ndarray::Array3::<f64>::ones((1, 2, 3)).into_dyn());
        let b = g.param(ndarray::Array3::<f64>::from_elem((1, 4, 3), 2.0).into_dyn());
        let c = g.batch_matmul(a, b, false, true);
        assert_eq!(g.value(c).shape(), &[1, 2, 4]);
        let s = g.sum_all(c);
        let grads = g.backward(s);
        // each a entry is multiplied against 4 b entries of value 2.
        assert_eq!(grads.get(a).unwrap()[[0, 0, 0]], 8.0);
        // each b entry against 2 a entries of value 1.
        assert_eq!(grads.get(b).unwrap()[[0, 0, 0]], 2.0);
    }
}
