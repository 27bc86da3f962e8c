//! Convolutions, pooling, resampling and patch gathering.
//!
//! All spatial tensors are `[N, C, H, W]`. Convolution weights are
//! `[O, C, KH, KW]`. Forward/backward are im2col + GEMM, parallel over the
//! batch axis with disjoint writes (per-sample results are reduced in index
//! order, so outputs are bitwise independent of the worker count).

use ndarray::linalg::general_mat_mul;
use ndarray::parallel::prelude::*;
use ndarray::{Array2, Array3, Array4, ArrayD, ArrayView2, ArrayView3, ArrayView4, Axis};

use super::{Backward, Gradients, Graph, Var};
use crate::scalar::Scalar;

fn as4<F: Scalar>(a: &ArrayD<F>) -> ArrayView4<'_, F> {
    a.view()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("spatial operand must be rank 4")
}

pub(crate) fn out_size(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// Patches of one sample as columns: `[C·KH·KW, HP·WP]`.
fn im2col_t<F: Scalar>(
    x: ArrayView3<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    hp: usize,
    wp: usize,
) -> Array2<F> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut cols = Array2::<F>::zeros((c * kh * kw, hp * wp));
    for ci in 0..c {
        let plane = x.index_axis(Axis(0), ci);
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ci * kh * kw + ky * kw + kx;
                let mut out_row = cols.row_mut(row);
                for oy in 0..hp {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wp {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out_row[oy * wp + ox] = plane[(iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col_t`]: scatter-adds columns back onto an image.
fn col2im<F: Scalar>(
    cols: ArrayView2<F>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    hp: usize,
    wp: usize,
) -> Array3<F> {
    let mut x = Array3::<F>::zeros((c, h, w));
    for ci in 0..c {
        let mut plane = x.index_axis_mut(Axis(0), ci);
        for ky in 0..kh {
            for kx in 0..kw {
                let row = cols.row(ci * kh * kw + ky * kw + kx);
                for oy in 0..hp {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wp {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let v = row[oy * wp + ox];
                        plane[(iy as usize, ix as usize)] = plane[(iy as usize, ix as usize)] + v;
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn conv_fwd<F: Scalar>(
    x: ArrayView4<F>,
    w: ArrayView4<F>,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, ci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(c, ci, "conv channels mismatch");
    let hp = out_size(h, kh, stride, pad);
    let wp = out_size(wd, kw, stride, pad);
    let wflat = w.into_shape_with_order((o, c * kh * kw)).unwrap();
    let mut y = Array4::<F>::zeros((n, o, hp, wp));
    y.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut yb)| {
            let cols = im2col_t(x.index_axis(Axis(0), i), kh, kw, stride, pad, hp, wp);
            let mut flat = Array2::<F>::zeros((o, hp * wp));
            general_mat_mul(F::one(), &wflat, &cols.view(), F::zero(), &mut flat);
            yb.assign(
                &flat
                    .into_shape_with_order((o, hp, wp))
                    .unwrap(),
            );
        });
    y
}

pub(crate) fn conv_bwd_input<F: Scalar>(
    gy: ArrayView4<F>,
    w: ArrayView4<F>,
    stride: usize,
    pad: usize,
    h: usize,
    wd: usize,
) -> Array4<F> {
    let (n, o, hp, wp) = (gy.shape()[0], gy.shape()[1], gy.shape()[2], gy.shape()[3]);
    let (ow, c, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(o, ow);
    let wflat = w.into_shape_with_order((o, c * kh * kw)).unwrap();
    let mut gx = Array4::<F>::zeros((n, c, h, wd));
    gx.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut gxb)| {
            let gyb = gy.index_axis(Axis(0), i);
            let gyflat = gyb.into_shape_with_order((o, hp * wp)).unwrap();
            let mut gcols = Array2::<F>::zeros((c * kh * kw, hp * wp));
            general_mat_mul(F::one(), &wflat.t(), &gyflat, F::zero(), &mut gcols);
            gxb.assign(&col2im(gcols.view(), c, h, wd, kh, kw, stride, pad, hp, wp));
        });
    gx
}

pub(crate) fn conv_bwd_weight<F: Scalar>(
    x: ArrayView4<F>,
    gy: ArrayView4<F>,
    stride: usize,
    pad: usize,
    kh: usize,
    kw: usize,
) -> Array4<F> {
    let (n, c, _h, _wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (_, o, hp, wp) = (gy.shape()[0], gy.shape()[1], gy.shape()[2], gy.shape()[3]);
    // Per-sample partials, reduced in index order for determinism.
    let partials: Vec<Array2<F>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let cols = im2col_t(x.index_axis(Axis(0), i), kh, kw, stride, pad, hp, wp);
            let gyb = gy.index_axis(Axis(0), i);
            let gyflat = gyb.into_shape_with_order((o, hp * wp)).unwrap();
            let mut gw = Array2::<F>::zeros((o, c * kh * kw));
            general_mat_mul(F::one(), &gyflat, &cols.t(), F::zero(), &mut gw);
            gw
        })
        .collect();
    let mut acc = Array2::<F>::zeros((o, c * kh * kw));
    for p in partials {
        ndarray::Zip::from(&mut acc).and(&p).for_each(|a, &v| *a = *a + v);
    }
    acc.into_shape_with_order((o, c, kh, kw)).unwrap()
}

struct Conv2d {
    x: Var,
    w: Var,
    stride: usize,
    pad: usize,
}

impl<F: Scalar> Backward<F> for Conv2d {
    fn backward(&self, _out: Var, g: &Graph<F>, grad_out: ArrayD<F>, sink: &mut Gradients<F>) {
        let x = as4(g.value(self.x));
        let w = as4(g.value(self.w));
        let gy = as4(&grad_out);
        if g.requires(self.w) {
            let gw = conv_bwd_weight(x, gy, self.stride, self.pad, w.shape()[2], w.shape()[3]);
            sink.add(self.w, gw.into_dyn());
        }
        if g.requires(self.x) {
            let gx = conv_bwd_input(gy, w, self.stride, self.pad, x.shape()[2], x.shape()[3]);
            sink.add(self.x, gx.into_dyn());
        }
    }
}

struct ConvTranspose2d {
    x: Var,
    w: Var,
    stride: usize,
    pad: usize,
}

impl<F: Scalar> Backward<F> for ConvTranspose2d {
    fn backward(&self, _out: Var, g: &Graph<F>, grad_out: ArrayD<F>, sink: &mut Gradients<F>) {
        let x = as4(g.value(self.x));
        let w = as4(g.value(self.w));
        let gy = as4(&grad_out);
        if g.requires(self.x) {
            // d/dx convT(x, w) adjoint: conv forward of the upstream grad.
            let gx = conv_fwd(gy, w, self.stride, self.pad);
            sink.add(self.x, gx.into_dyn());
        }
        if g.requires(self.w) {
            // <gy, convT(x,w)> = <conv(gy,w), x>  ⇒  gw = conv_bwd_weight(gy, x).
            let gw = conv_bwd_weight(gy, x, self.stride, self.pad, w.shape()[2], w.shape()[3]);
            sink.add(self.w, gw.into_dyn());
        }
    }
}

struct AvgPool2 {
    x: Var,
}

impl<F: Scalar> Backward<F> for AvgPool2 {
    fn backward(&self, _out: Var, g: &Graph<F>, grad_out: ArrayD<F>, sink: &mut Gradients<F>) {
        if !g.requires(self.x) {
            return;
        }
        let x = g.value(self.x);
        let gy = as4(&grad_out);
        let (n, c, hp, wp) = (gy.shape()[0], gy.shape()[1], gy.shape()[2], gy.shape()[3]);
        let q = F::from_f64(0.25);
        let mut gx = ArrayD::<F>::zeros(x.raw_dim());
        {
            let mut gx4 = gx.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
            for ni in 0..n {
                for ci in 0..c {
                    for i in 0..hp {
                        for j in 0..wp {
                            let gv = gy[(ni, ci, i, j)] * q;
                            for di in 0..2 {
                                for dj in 0..2 {
                                    gx4[(ni, ci, 2 * i + di, 2 * j + dj)] = gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        sink.add(self.x, gx);
    }
}

struct Upsample2 {
    x: Var,
}

impl<F: Scalar> Backward<F> for Upsample2 {
    fn backward(&self, _out: Var, g: &Graph<F>, grad_out: ArrayD<F>, sink: &mut Gradients<F>) {
        if !g.requires(self.x) {
            return;
        }
        let gy = as4(&grad_out);
        let (n, c, h2, w2) = (gy.shape()[0], gy.shape()[1], gy.shape()[2], gy.shape()[3]);
        let (h, w) = (h2 / 2, w2 / 2);
        let mut gx = Array4::<F>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let mut acc = F::zero();
                        for di in 0..2 {
                            for dj in 0..2 {
                                acc = acc + gy[(ni, ci, 2 * i + di, 2 * j + dj)];
                            }
                        }
                        gx[(ni, ci, i, j)] = acc;
                    }
                }
            }
        }
        sink.add(self.x, gx.into_dyn());
    }
}

struct GlobalAvgPool {
    x: Var,
}

impl<F: Scalar> Backward<F> for GlobalAvgPool {
    fn backward(&self, _out: Var, g: &Graph<F>, grad_out: ArrayD<F>, sink: &mut Gradients<F>) {
        if !g.requires(self.x) {
            return;
        }
        let x = g.value(self.x);
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let inv = F::from_f64(1.0 / (h * w) as f64);
        let gy = grad_out
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut gx = ArrayD::<F>::zeros(x.raw_dim());
        {
            let mut gx4 = gx.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
            for ni in 0..gy.shape()[0] {
                for ci in 0..gy.shape()[1] {
                    let gv = gy[(ni, ci)] * inv;
                    gx4.index_axis_mut(Axis(0), ni)
                        .index_axis_mut(Axis(0), ci)
                        .fill(gv);
                }
            }
        }
        sink.add(self.x, gx);
    }
}

struct GatherPatches {
    x: Var,
    patch: usize,
    stride: usize,
}

impl<F: Scalar> Backward<F> for GatherPatches {
    fn backward(&self, _out: Var, g: &Graph<F>, grad_out: ArrayD<F>, sink: &mut Gradients<F>) {
        if !g.requires(self.x) {
            return;
        }
        let x = g.value(self.x);
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let p = self.patch;
        let s = self.stride;
        let side = (h - p) / s + 1;
        let gy = grad_out
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let mut gx = Array4::<F>::zeros((n, c, h, w));
        for ni in 0..n {
            for ty in 0..side {
                for tx in 0..side {
                    let t = ty * side + tx;
                    let row = gy.index_axis(Axis(0), ni);
                    let row = row.index_axis(Axis(0), t);
                    for ci in 0..c {
                        for py in 0..p {
                            for px in 0..p {
                                let v = row[ci * p * p + py * p + px];
                                let iy = ty * s + py;
                                let ix = tx * s + px;
                                gx[(ni, ci, iy, ix)] = gx[(ni, ci, iy, ix)] + v;
                            }
                        }
                    }
                }
            }
        }
        sink.add(self.x, gx.into_dyn());
    }
}

struct BlurAxis<F: Scalar> {
    x: Var,
    kernel: Vec<F>,
    axis: usize, // 2 (rows) or 3 (cols)
}

impl<F: Scalar> Backward<F> for BlurAxis<F> {
    fn backward(&self, _out: Var, g: &Graph<F>, grad_out: ArrayD<F>, sink: &mut Gradients<F>) {
        if !g.requires(self.x) {
            return;
        }
        let x = g.value(self.x);
        let gy = as4(&grad_out);
        let k = self.kernel.len();
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let mut gx = ArrayD::<F>::zeros(x.raw_dim());
        {
            let mut gx4 = gx.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
            for ni in 0..n {
                for ci in 0..c {
                    if self.axis == 2 {
                        let (hp, w) = (gy.shape()[2], gy.shape()[3]);
                        for i in 0..hp {
                            for j in 0..w {
                                let gv = gy[(ni, ci, i, j)];
                                for t in 0..k {
                                    gx4[(ni, ci, i + t, j)] =
                                        gx4[(ni, ci, i + t, j)] + gv * self.kernel[t];
                                }
                            }
                        }
                    } else {
                        let (h, wp) = (gy.shape()[2], gy.shape()[3]);
                        for i in 0..h {
                            for j in 0..wp {
                                let gv = gy[(ni, ci, i, j)];
                                for t in 0..k {
                                    gx4[(ni, ci, i, j + t)] =
                                        gx4[(ni, ci, i, j + t)] + gv * self.kernel[t];
                                }
                            }
                        }
                    }
                }
            }
        }
        sink.add(self.x, gx);
    }
}

impl<F: Scalar> Graph<F> {
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let v = conv_fwd(as4(self.value(x)), as4(self.value(w)), stride, pad).into_dyn();
        self.push_op(v, &[x, w], Box::new(Conv2d { x, w, stride, pad }))
    }

    /// Adjoint of [`Graph::conv2d`] with the same `(stride, pad)` geometry:
    /// maps `[N, O, h', w']` back up to `[N, C, h, w]`.
    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        out_hw: (usize, usize),
    ) -> Var {
        let xv = as4(self.value(x));
        let wv = as4(self.value(w));
        let v = conv_bwd_input(xv, wv, stride, pad, out_hw.0, out_hw.1).into_dyn();
        self.push_op(v, &[x, w], Box::new(ConvTranspose2d { x, w, stride, pad }))
    }

    /// 2×2 average pooling, floor semantics (a trailing odd row/col is dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = as4(self.value(x));
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (hp, wp) = (h / 2, w / 2);
        let q = F::from_f64(0.25);
        let mut y = Array4::<F>::zeros((n, c, hp, wp));
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..hp {
                    for j in 0..wp {
                        let mut acc = F::zero();
                        for di in 0..2 {
                            for dj in 0..2 {
                                acc = acc + xv[(ni, ci, 2 * i + di, 2 * j + dj)];
                            }
                        }
                        y[(ni, ci, i, j)] = acc * q;
                    }
                }
            }
        }
        self.push_op(y.into_dyn(), &[x], Box::new(AvgPool2 { x }))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = as4(self.value(x));
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let mut y = Array4::<F>::zeros((n, c, 2 * h, 2 * w));
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = xv[(ni, ci, i, j)];
                        y[(ni, ci, 2 * i, 2 * j)] = v;
                        y[(ni, ci, 2 * i, 2 * j + 1)] = v;
                        y[(ni, ci, 2 * i + 1, 2 * j)] = v;
                        y[(ni, ci, 2 * i + 1, 2 * j + 1)] = v;
                    }
                }
            }
        }
        self.push_op(y.into_dyn(), &[x], Box::new(Upsample2 { x }))
    }

    /// `[N, C, H, W] → [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = as4(self.value(x));
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let inv = F::from_f64(1.0 / (h * w) as f64);
        let mut y = Array2::<F>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let plane = xv.index_axis(Axis(0), ni);
                let plane = plane.index_axis(Axis(0), ci);
                let mut acc = F::zero();
                for v in plane.iter() {
                    acc = acc + *v;
                }
                y[(ni, ci)] = acc * inv;
            }
        }
        self.push_op(y.into_dyn(), &[x], Box::new(GlobalAvgPool { x }))
    }

    /// Overlapping patch extraction: `[N, C, H, W] → [N, T, C·P·P]` with
    /// `T = ((H−P)/S + 1)²`; tokens in row-major window order, patch pixels
    /// flattened `[c, py, px]`.
    pub fn gather_patches(&mut self, x: Var, patch: usize, stride: usize) -> Var {
        let xv = as4(self.value(x));
        let (n, c, h, _w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let side = (h - patch) / stride + 1;
        let t = side * side;
        let mut y = Array3::<F>::zeros((n, t, c * patch * patch));
        for ni in 0..n {
            for ty in 0..side {
                for tx in 0..side {
                    let ti = ty * side + tx;
                    let mut row = y.index_axis_mut(Axis(0), ni);
                    let mut row = row.index_axis_mut(Axis(0), ti);
                    for ci in 0..c {
                        for py in 0..patch {
                            for px in 0..patch {
                                row[ci * patch * patch + py * patch + px] =
                                    xv[(ni, ci, ty * stride + py, tx * stride + px)];
                            }
                        }
                    }
                }
            }
        }
        self.push_op(y.into_dyn(), &[x], Box::new(GatherPatches { x, patch, stride }))
    }

    /// Valid 1-D correlation with a constant kernel along axis 2 or 3
    /// (separable Gaussian filtering for SSIM windows).
    pub fn blur_axis(&mut self, x: Var, kernel: &[f64], axis: usize) -> Var {
        assert!(axis == 2 || axis == 3, "blur axis must be spatial");
        let kern: Vec<F> = kernel.iter().map(|&v| F::from_f64(v)).collect();
        let xv = as4(self.value(x));
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let k = kern.len();
        let (hp, wp) = if axis == 2 { (h - k + 1, w) } else { (h, w - k + 1) };
        let mut y = Array4::<F>::zeros((n, c, hp, wp));
        for ni in 0..n {
            for ci in 0..c {
                let plane = xv.index_axis(Axis(0), ni);
                let plane = plane.index_axis(Axis(0), ci);
                for i in 0..hp {
                    for j in 0..wp {
                        let mut acc = F::zero();
                        for t in 0..k {
                            let v = if axis == 2 {
                                plane[(i + t, j)]
                            } else {
                                plane[(i, j + t)]
                            };
                            acc = acc + v * kern[t];
                        }
                        y[(ni, ci, i, j)] = acc;
                    }
                }
            }
        }
        self.push_op(
            y.into_dyn(),
            &[x],
            Box::new(BlurAxis {
                x,
                kernel: kern,
                axis,
            }),
        )
    }
}
