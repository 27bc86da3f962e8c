//! Elementwise operations, broadcasts, reductions and normalisations.

use ndarray::{ArrayD, Axis, IxDyn, Zip};

use super::{Backward, Gradients, Graph, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy)]
enum Unary {
    Neg,
    Exp,
    Tanh,
    Sqrt,
    Square,
    Abs,
    LeakyRelu(f64),
    Relu,
    Softplus,
    MaxScalar(f64),
    Powf(f64),
    Scale(f64),
    AddScalar,
}

struct UnaryOp {
    x: Var,
    kind: Unary,
}

/// Numerically stable `ln(1 + e^x)`.
fn softplus<F: Scalar>(x: F) -> F {
    let lim = F::from_f64(30.0);
    if x > lim {
        x
    } else if x < -lim {
        x.exp()
    } else {
        (F::one() + x.exp()).ln()
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    let one = F::one();
    if x >= F::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

impl<F: Scalar> Backward<F> for UnaryOp {
    fn backward(&self, out: Var, g: &Graph<F>, grad_out: ArrayD<F>, sink: &mut Gradients<F>) {
        if !g.requires(self.x) {
            return;
        }
        let x = g.value(self.x);
        let y = g.value(out);
        let gx = match self.kind {
            Unary::Neg => grad_out.mapv(|v| -v),
            Unary::Exp => &grad_out * y,
            Unary::Tanh => {
                let mut gx = grad_out;
                Zip::from(&mut gx).and(y).for_each(|gv, &yv| {
                    *gv = *gv * (F::one() - yv * yv);
                });
                gx
            }
            Unary::Sqrt => {
                let mut gx = grad_out;
                let half = F::from_f64(0.5);
                Zip::from(&mut gx).and(y).for_each(|gv, &yv| *gv = *gv * half / yv);
                gx
            }
            Unary::Square => {
                let mut gx = grad_out;
                let two = F::from_f64(2.0);
                Zip::from(&mut gx).and(x).for_each(|gv, &xv| *gv = *gv * two * xv);
                gx
            }
            Unary::Abs => {
                let mut gx = grad_out;
                Zip::from(&mut gx).and(x).for_each(|gv, &xv| {
                    *gv = if xv > F::zero() {
                        *gv
                    } else if xv < F::zero() {
                        -*gv
                    } else {
                        F::zero()
                    }
                });
                gx
            }
            Unary::LeakyRelu(slope) => {
                let a = F::from_f64(slope);
                let mut gx = grad_out;
                Zip::from(&mut gx).and(x).for_each(|gv, &xv| {
                    if xv <= F::zero() {
                        *gv = *gv * a;
                    }
                });
                gx
            }
            Unary::Relu => {
                let mut gx = grad_out;
                Zip::from(&mut gx).and(x).for_each(|gv, &xv| {
                    if xv <= F::zero() {
                        *gv = F::zero();
                    }
                });
                gx
            }
            Unary::Softplus => {
                let mut gx = grad_out;
                Zip::from(&mut gx).and(x).for_each(|gv, &xv| *gv = *gv * sigmoid(xv));
                gx
            }
            Unary::MaxScalar(c) => {
                let c = F::from_f64(c);
                let mut gx = grad_out;
                Zip::from(&mut gx).and(x).for_each(|gv, &xv| {
                    if xv < c {
                        *gv = F::zero();
                    }
                });
                gx
            }
            Unary::Powf(p) => {
                let pf = F::from_f64(p);
                let mut gx = grad_out;
                Zip::from(&mut gx).and(x).for_each(|gv, &xv| {
                    *gv = *gv * pf * xv.powf(pf - F::one());
                });
                gx
            }
            Unary::Scale(c) => {
                let c = F::from_f64(c);
                grad_out.mapv(|v| v * c)
            }
            Unary::AddScalar => grad_out,
        };
        sink.add(self.x, gx);
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

struct BinaryOp {
    a: Var,
    b: Var,
    kind: Binary,
}

impl<F: Scalar> Backward<F> for BinaryOp {
    fn backward(&self, _out: Var, g: &Graph<F>, grad_out: ArrayD<F>, sink: &mut Gradients<F>) {
        match self.kind {
            Binary::Add => {
                if g.requires(self.b) {
                    sink.add(self.b, grad_out.clone());
                }
                if g.requires(self.a) {
                    sink.add(self.a, grad_out);
                }
            }
            Binary::Sub => {
                if g.requires(self.b) {
                    sink.add(self.b, grad_out.mapv(|v| -v));
                }
                if g.requires(self.a) {
                    sink.add(self.a, grad_out);
                }
            }
            Binary::Mul => {
                if g.requires(self.a) {
                    sink.add(self.a, &grad_out * g.value(self.b));
                }
                if g.requires(self.b) {
                    sink.add(self.b, &grad_out * g.value(self.a));
                }
            }
        }
    }
}

/// y[.., d] = x[.., d] + b[d] — bias over the last axis.
struct AddBiasLast {
    x: Var,
    b: Var,
}

impl<F: Scalar> Backward<F> for AddBiasLast {
    fn backward(&self, _out: Var, g: &Graph<F>, grad_out: ArrayD<F>, sink: &mut Gradients<F>) {
        if g.requires(self.b) {
            let d = *grad_out.shape().last().unwrap();
            let flat = grad_out
                .view()
                .into_shape_with_order((grad_out.len() / d, d))
                .unwrap();
            let gb = flat.sum_axis(Axis(0));
            sink.add(self.b, gb.into_dyn());
        }
        if g.requires(self.x) {
            sink.add(self.x, grad_out);
        }
    }
}

/// y[n, c, ..] = x[n, c, ..] + b[c] — bias over axis 1 (conv channels).
struct AddBiasChan {
    x: Var,
    b: Var,
}

impl<F: Scalar> Backward<F> for AddBiasChan {
    fn backward(&self, _out: Var, g: &Graph<F>, grad_out: ArrayD<F>, sink: &mut Gradients<F>) {
        if g.requires(self.b) {
            let c = grad_out.shape()[1];
            let mut gb = ndarray::Array1::<F>::zeros(c);
            for (ci, lane) in grad_out.axis_iter(Axis(1)).enumerate() {
                gb[ci] = lane.iter().fold(F::zero(), |acc, &v| acc + v);
            }
            sink.add(self.b, gb.into_dyn());
        }
        if g.requires(self.x) {
            sink.add(self.x, grad_out);
        }
    }
}

/// y[n, c, h, w] = x[n, c, h, w] * s[n, c] — per-sample channel scaling.
struct MulChannels {
    x: Var,
    s: Var,
}

impl<F: Scalar> Backward<F> for MulChannels {
    fn backward(&self, _out: Var, g: &Graph<F>, grad_out: ArrayD<F>, sink: &mut Gradients<F>) {
        let x = g.value(self.x);
        let s = g.value(self.s);
        let (n, c) = (x.shape()[0], x.shape()[1]);
        if g.requires(self.s) {
            let mut gs = ndarray::Array2::<F>::zeros((n, c));
            for ni in 0..n {
                for ci in 0..c {
                    let go = grad_out.index_axis(Axis(0), ni);
                    let go = go.index_axis(Axis(0), ci);
                    let xv = x.index_axis(Axis(0), ni);
                    let xv = xv.index_axis(Axis(0), ci);
                    let mut acc = F::zero();
                    Zip::from(&go).and(&xv).for_each(|&a, &b| acc = acc + a * b);
                    gs[(ni, ci)] = acc;
                }
            }
            sink.add(self.s, gs.into_dyn());
        }
        if g.requires(self.x) {
            let mut gx = grad_out;
            for ni in 0..n {
                for ci in 0..c {
                    let sv = s[[ni, ci]];
                    let mut lane = gx.index_axis_mut(Axis(0), ni);
                    let mut lane = lane.index_axis_mut(Axis(0), ci);
                    lane.mapv_inplace(|v| v * sv);
                }
            }
            sink.add(self.x, gx);
        }
    }
}

/// y[n, d] = x[n, d] * r[n] — per-row scaling.
struct MulRows {
    x: Var,
    r: Var,
}

impl<F: Scalar> Backward<F> for MulRows {
    fn backward(&self, _out: Var, g: &Graph<F>, grad_out: ArrayD<F>, sink: &mut Gradients<F>) {
        let x = g.value(self.x);
        let r = g.value(self.r);
        let n = x.shape()[0];
        if g.requires(self.r) {
            let mut gr = ndarray::Array1::<F>::zeros(n);
            for ni in 0..n {
                let go = grad_out.index_axis(Axis(0), ni);
                let xv = x.index_axis(Axis(0), ni);
                let mut acc = F::zero();
                Zip::from(&go).and(&xv).for_each(|&a, &b| acc = acc + a * b);
                gr[ni] = acc;
            }
            sink.add(self.r, gr.into_dyn());
        }
        if g.requires(self.x) {
            let mut gx = grad_out;
            for ni in 0..n {
                let rv = r[ni];
                gx.index_axis_mut(Axis(0), ni).mapv_inplace(|v| v * rv);
            }
            sink.add(self.x, gx);
        }
    }
}

/// y = x * s where `s` is a 0-d variable (e.g. a learned noise strength).
struct ScaleBySVar {
    x: Var,
    s: Var,
}

impl<F: Scalar> Backward<F> for ScaleBySVar {
    fn backward(&self, _out: Var, g: &Graph<F>, grad_out: ArrayD<F>, sink: &mut Gradients<F>) {
        if g.requires(self.s) {
            let x = g.value(self.x);
            let mut acc = F::zero();
            Zip::from(&grad_out).and(x).for_each(|&a, &b| acc = acc + a * b);
            sink.add(self.s, ArrayD::from_elem(IxDyn(&[]), acc));
        }
        if g.requires(self.x) {
            let s = g.scalar(self.s);
            sink.add(self.x, grad_out.mapv(|v| v * s));
        }
    }
}

/// y[n, c, h, w] = x[n, c, h, w] + s · pattern[h, w] for a constant spatial
/// pattern and a scalar variable s (noise injection).
struct AddScaledBroadcast<F: Scalar> {
    x: Var,
    s: Var,
    pattern: ArrayD<F>,
}

impl<F: Scalar> Backward<F> for AddScaledBroadcast<F> {
    fn backward(&self, _out: Var, g: &Graph<F>, grad_out: ArrayD<F>, sink: &mut Gradients<F>) {
        if g.requires(self.s) {
            let p = self
                .pattern
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let gy = grad_out
                .view()
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap();
            let mut acc = F::zero();
            for ni in 0..gy.shape()[0] {
                for ci in 0..gy.shape()[1] {
                    for i in 0..gy.shape()[2] {
                        for j in 0..gy.shape()[3] {
                            acc = acc + gy[(ni, ci, i, j)] * p[(i, j)];
                        }
                    }
                }
            }
            sink.add(self.s, ArrayD::from_elem(IxDyn(&[]), acc));
        }
        if g.requires(self.x) {
            sink.add(self.x, grad_out);
        }
    }
}

/// y = x ∘ m for a constant mask m.
struct MulMask<F: Scalar> {
    x: Var,
    mask: ArrayD<F>,
}

impl<F: Scalar> Backward<F> for MulMask<F> {
    fn backward(&self, _out: Var, g: &Graph<F>, grad_out: ArrayD<F>, sink: &mut Gradients<F>) {
        if g.requires(self.x) {
            sink.add(self.x, &grad_out * &self.mask);
        }
    }
}

struct SumAll {
    x: Var,
    mean: bool,
}

impl<F: Scalar> Backward<F> for SumAll {
    fn backward(&self, _out: Var, g: &Graph<F>, grad_out: ArrayD<F>, sink: &mut Gradients<F>) {
        if !g.requires(self.x) {
            return;
        }
        let x = g.value(self.x);
        let mut seed = grad_out.iter().next().copied().unwrap_or_else(F::zero);
        if self.mean {
            seed = seed / F::from_f64(x.len() as f64);
        }
        sink.add(self.x, ArrayD::from_elem(x.raw_dim(), seed));
    }
}

struct MeanAxis {
    x: Var,
    axis: usize,
}

impl<F: Scalar> Backward<F> for MeanAxis {
    fn backward(&self, _out: Var, g: &Graph<F>, grad_out: ArrayD<F>, sink: &mut Gradients<F>) {
        if !g.requires(self.x) {
            return;
        }
        let x = g.value(self.x);
        let n = F::from_f64(x.shape()[self.axis] as f64);
        let expanded = grad_out.insert_axis(Axis(self.axis));
        let mut gx = ArrayD::<F>::zeros(x.raw_dim());
        for mut lane in gx.axis_iter_mut(Axis(self.axis)) {
            Zip::from(&mut lane)
                .and(expanded.index_axis(Axis(self.axis), 0))
                .for_each(|o, &gv| *o = gv / n);
        }
        sink.add(self.x, gx);
    }
}

/// y[..] = Σ_d x[.., d] — sum over the last axis.
struct SumLast {
    x: Var,
}

impl<F: Scalar> Backward<F> for SumLast {
    fn backward(&self, _out: Var, g: &Graph<F>, grad_out: ArrayD<F>, sink: &mut Gradients<F>) {
        if !g.requires(self.x) {
            return;
        }
        let x = g.value(self.x);
        let d = *x.shape().last().unwrap();
        let expanded = grad_out.insert_axis(Axis(x.ndim() - 1));
        let mut gx = ArrayD::<F>::zeros(x.raw_dim());
        let last = x.ndim() - 1;
        for k in 0..d {
            Zip::from(gx.index_axis_mut(Axis(last), k))
                .and(expanded.index_axis(Axis(last), 0))
                .for_each(|o, &gv| *o = gv);
        }
        sink.add(self.x, gx);
    }
}

/// Softmax over the last axis.
struct SoftmaxLast {
    x: Var,
}

impl<F: Scalar> Backward<F> for SoftmaxLast {
    fn backward(&self, out: Var, g: &Graph<F>, grad_out: ArrayD<F>, sink: &mut Gradients<F>) {
        if !g.requires(self.x) {
            return;
        }
        let y = g.value(out);
        let d = *y.shape().last().unwrap();
        let rows = y.len() / d;
        let yf = y.view().into_shape_with_order((rows, d)).unwrap();
        let gf = grad_out.view().into_shape_with_order((rows, d)).unwrap();
        let mut gx = ndarray::Array2::<F>::zeros((rows, d));
        for r in 0..rows {
            let yr = yf.row(r);
            let gr = gf.row(r);
            let mut dot = F::zero();
            for k in 0..d {
                dot = dot + yr[k] * gr[k];
            }
            let mut o = gx.row_mut(r);
            for k in 0..d {
                o[k] = yr[k] * (gr[k] - dot);
            }
        }
        sink.add(self.x, gx.into_dyn().into_shape_with_order(y.raw_dim()).unwrap());
    }
}

/// Layer normalisation over the last axis with affine parameters.
struct LayerNorm {
    x: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
}

impl<F: Scalar> Backward<F> for LayerNorm {
    fn backward(&self, _out: Var, g: &Graph<F>, grad_out: ArrayD<F>, sink: &mut Gradients<F>) {
        let x = g.value(self.x);
        let gamma = g.value(self.gamma);
        let d = *x.shape().last().unwrap();
        let rows = x.len() / d;
        let xf = x.view().into_shape_with_order((rows, d)).unwrap();
        let gf = grad_out.view().into_shape_with_order((rows, d)).unwrap();
        let gammaf = gamma.view().into_shape_with_order(d).unwrap();
        let eps = F::from_f64(self.eps);
        let dn = F::from_f64(d as f64);

        let mut gx = ndarray::Array2::<F>::zeros((rows, d));
        let mut ggamma = ndarray::Array1::<F>::zeros(d);
        let mut gbeta = ndarray::Array1::<F>::zeros(d);
        let need_x = g.requires(self.x);
        let need_g = g.requires(self.gamma);
        let need_b = g.requires(self.beta);

        for r in 0..rows {
            let xr = xf.row(r);
            let gr = gf.row(r);
            let mut mean = F::zero();
            for k in 0..d {
                mean = mean + xr[k];
            }
            mean = mean / dn;
            let mut var = F::zero();
            for k in 0..d {
                let c = xr[k] - mean;
                var = var + c * c;
            }
            var = var / dn;
            let inv_std = F::one() / (var + eps).sqrt();

            // dxhat, plus running sums needed for dx.
            let mut sum_dxhat = F::zero();
            let mut sum_dxhat_xhat = F::zero();
            for k in 0..d {
                let xhat = (xr[k] - mean) * inv_std;
                let dxhat = gr[k] * gammaf[k];
                sum_dxhat = sum_dxhat + dxhat;
                sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                if need_g {
                    ggamma[k] = ggamma[k] + gr[k] * xhat;
                }
                if need_b {
                    gbeta[k] = gbeta[k] + gr[k];
                }
            }
            if need_x {
                let mut o = gx.row_mut(r);
                for k in 0..d {
                    let xhat = (xr[k] - mean) * inv_std;
                    let dxhat = gr[k] * gammaf[k];
                    o[k] = inv_std / dn * (dn * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                }
            }
        }
        if need_x {
            sink.add(
                self.x,
                gx.into_dyn().into_shape_with_order(x.raw_dim()).unwrap(),
            );
        }
        if need_g {
            sink.add(self.gamma, ggamma.into_dyn());
        }
        if need_b {
            sink.add(self.beta, gbeta.into_dyn());
        }
    }
}

impl<F: Scalar> Graph<F> {
    fn unary(&mut self, x: Var, kind: Unary, value: ArrayD<F>) -> Var {
        self.push_op(value, &[x], Box::new(UnaryOp { x, kind }))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|v| -v);
        self.unary(x, Unary::Neg, v)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|v| v.exp());
        self.unary(x, Unary::Exp, v)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|v| v.tanh());
        self.unary(x, Unary::Tanh, v)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|v| v.sqrt());
        self.unary(x, Unary::Sqrt, v)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|v| v * v);
        self.unary(x, Unary::Square, v)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|v| v.abs());
        self.unary(x, Unary::Abs, v)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let a = F::from_f64(slope);
        let v = self
            .value(x)
            .mapv(|v| if v > F::zero() { v } else { v * a });
        self.unary(x, Unary::LeakyRelu(slope), v)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|v| if v > F::zero() { v } else { F::zero() });
        self.unary(x, Unary::Relu, v)
    }

    /// `ln(1 + e^x)`, numerically stable.
    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(softplus);
        self.unary(x, Unary::Softplus, v)
    }

    pub fn max_scalar(&mut self, x: Var, c: f64) -> Var {
        let cf = F::from_f64(c);
        let v = self.value(x).mapv(|v| if v > cf { v } else { cf });
        self.unary(x, Unary::MaxScalar(c), v)
    }

    /// `x^p` for constant `p` (domain `x > 0`).
    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        let pf = F::from_f64(p);
        let v = self.value(x).mapv(|v| v.powf(pf));
        self.unary(x, Unary::Powf(p), v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let cf = F::from_f64(c);
        let v = self.value(x).mapv(|v| v * cf);
        self.unary(x, Unary::Scale(c), v)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let cf = F::from_f64(c);
        let v = self.value(x).mapv(|v| v + cf);
        self.unary(x, Unary::AddScalar, v)
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Var {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "elementwise operands must agree in shape"
        );
        let v = match kind {
            Binary::Add => self.value(a) + self.value(b),
            Binary::Sub => self.value(a) - self.value(b),
            Binary::Mul => self.value(a) * self.value(b),
        };
        self.push_op(v, &[a, b], Box::new(BinaryOp { a, b, kind }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Mul)
    }

    pub fn add_bias_last(&mut self, x: Var, b: Var) -> Var {
        let d = *self.value(x).shape().last().unwrap();
        assert_eq!(self.value(b).len(), d, "bias length must match last axis");
        let bv = self.value(b).view().into_shape_with_order(d).unwrap().to_owned();
        let mut v = self.value(x).clone();
        {
            let n = v.len() / d;
            let mut flat = v.view_mut().into_shape_with_order((n, d)).unwrap();
            for mut row in flat.rows_mut() {
                Zip::from(&mut row).and(&bv).for_each(|o, &bk| *o = *o + bk);
            }
        }
        self.push_op(v, &[x, b], Box::new(AddBiasLast { x, b }))
    }

    pub fn add_bias_chan(&mut self, x: Var, b: Var) -> Var {
        let c = self.value(x).shape()[1];
        assert_eq!(self.value(b).len(), c, "bias length must match channel axis");
        let bv = self.value(b).view().into_shape_with_order(c).unwrap().to_owned();
        let mut v = self.value(x).clone();
        for (ci, mut lane) in v.axis_iter_mut(Axis(1)).enumerate() {
            let bk = bv[ci];
            lane.mapv_inplace(|val| val + bk);
        }
        self.push_op(v, &[x, b], Box::new(AddBiasChan { x, b }))
    }

    /// `x[n, c, ...] * s[n, c]`, broadcast over trailing axes.
    pub fn mul_channels(&mut self, x: Var, s: Var) -> Var {
        let (n, c) = (self.value(x).shape()[0], self.value(x).shape()[1]);
        assert_eq!(self.value(s).shape(), &[n, c], "scale must be [N, C]");
        let sv = self.value(s).clone();
        let mut v = self.value(x).clone();
        for ni in 0..n {
            for ci in 0..c {
                let f = sv[[ni, ci]];
                let mut lane = v.index_axis_mut(Axis(0), ni);
                let mut lane = lane.index_axis_mut(Axis(0), ci);
                lane.mapv_inplace(|val| val * f);
            }
        }
        self.push_op(v, &[x, s], Box::new(MulChannels { x, s }))
    }

    /// `x[n, d] * r[n]`, broadcast over the last axis.
    pub fn mul_rows(&mut self, x: Var, r: Var) -> Var {
        let n = self.value(x).shape()[0];
        assert_eq!(self.value(r).len(), n, "row scale must be [N]");
        let rv = self.value(r).view().into_shape_with_order(n).unwrap().to_owned();
        let mut v = self.value(x).clone();
        for ni in 0..n {
            let f = rv[ni];
            v.index_axis_mut(Axis(0), ni).mapv_inplace(|val| val * f);
        }
        self.push_op(v, &[x, r], Box::new(MulRows { x, r }))
    }

    pub fn scale_by_svar(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "scale must be scalar");
        let f = self.scalar(s);
        let v = self.value(x).mapv(|val| val * f);
        self.push_op(v, &[x, s], Box::new(ScaleBySVar { x, s }))
    }

    /// `x[n,c,h,w] + s · pattern[h,w]` with scalar variable `s`.
    pub fn add_scaled_broadcast(&mut self, x: Var, s: Var, pattern: ArrayD<F>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 4);
        assert_eq!(&xv.shape()[2..], pattern.shape());
        let sf = self.scalar(s);
        let p2 = pattern.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        let mut v = xv.clone();
        {
            let mut v4 = v.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
            for ni in 0..v4.shape()[0] {
                for ci in 0..v4.shape()[1] {
                    let mut plane = v4.index_axis_mut(Axis(0), ni);
                    let mut plane = plane.index_axis_mut(Axis(0), ci);
                    Zip::from(&mut plane).and(&p2).for_each(|o, &pv| *o = *o + sf * pv);
                }
            }
        }
        self.push_op(v, &[x, s], Box::new(AddScaledBroadcast { x, s, pattern }))
    }

    pub fn mul_mask(&mut self, x: Var, mask: ArrayD<F>) -> Var {
        assert_eq!(self.value(x).shape(), mask.shape());
        let v = self.value(x) * &mask;
        self.push_op(v, &[x], Box::new(MulMask { x, mask }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = F::zero();
        for &v in self.value(x).iter() {
            acc = acc + v;
        }
        let v = ArrayD::from_elem(IxDyn(&[]), acc);
        self.push_op(v, &[x], Box::new(SumAll { x, mean: false }))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let mut acc = F::zero();
        for &v in self.value(x).iter() {
            acc = acc + v;
        }
        let v = ArrayD::from_elem(IxDyn(&[]), acc / F::from_f64(n as f64));
        self.push_op(v, &[x], Box::new(SumAll { x, mean: true }))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let n = F::from_f64(self.value(x).shape()[axis] as f64);
        let v = self.value(x).sum_axis(Axis(axis)).mapv(|s| s / n);
        self.push_op(v, &[x], Box::new(MeanAxis { x, axis }))
    }

    pub fn sum_last(&mut self, x: Var) -> Var {
        let last = self.value(x).ndim() - 1;
        let v = self.value(x).sum_axis(Axis(last));
        self.push_op(v, &[x], Box::new(SumLast { x }))
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        let rows = xv.len() / d;
        let xf = xv.view().into_shape_with_order((rows, d)).unwrap();
        let mut out = ndarray::Array2::<F>::zeros((rows, d));
        for r in 0..rows {
            let row = xf.row(r);
            let mut m = row[0];
            for k in 1..d {
                if row[k] > m {
                    m = row[k];
                }
            }
            let mut sum = F::zero();
            let mut o = out.row_mut(r);
            for k in 0..d {
                let e = (row[k] - m).exp();
                o[k] = e;
                sum = sum + e;
            }
            for k in 0..d {
                o[k] = o[k] / sum;
            }
        }
        let v = out.into_dyn().into_shape_with_order(xv.raw_dim()).unwrap();
        self.push_op(v, &[x], Box::new(SoftmaxLast { x }))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        assert_eq!(self.value(gamma).len(), d);
        assert_eq!(self.value(beta).len(), d);
        let rows = xv.len() / d;
        let xf = xv.view().into_shape_with_order((rows, d)).unwrap();
        let gammav = self.value(gamma).view().into_shape_with_order(d).unwrap().to_owned();
        let betav = self.value(beta).view().into_shape_with_order(d).unwrap().to_owned();
        let epsf = F::from_f64(eps);
        let dn = F::from_f64(d as f64);
        let mut out = ndarray::Array2::<F>::zeros((rows, d));
        for r in 0..rows {
            let row = xf.row(r);
            let mut mean = F::zero();
            for k in 0..d {
                mean = mean + row[k];
            }
            mean = mean / dn;
            let mut var = F::zero();
            for k in 0..d {
                let c = row[k] - mean;
                var = var + c * c;
            }
            var = var / dn;
            let inv_std = F::one() / (var + epsf).sqrt();
            let mut o = out.row_mut(r);
            for k in 0..d {
                o[k] = (row[k] - mean) * inv_std * gammav[k] + betav[k];
            }
        }
        let v = out.into_dyn().into_shape_with_order(xv.raw_dim()).unwrap();
        self.push_op(
            v,
            &[x, gamma, beta],
            Box::new(LayerNorm { x, gamma, beta, eps }),
        )
    }
}
