//! Parameterised layers and the name-addressed parameter registry that the
//! optimiser, checkpoints and freezing logic all share.
//!
//! Models enumerate `(name, array)` pairs in a stable order (names are
//! hierarchical, e.g. `map.l0.w`). A forward pass first *binds* the model
//! onto a [`Graph`] — trainable models bind as differentiable leaves, frozen
//! ones as constants — then layers fetch their bound [`Var`]s by name.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Graph, Var};
use crate::rng::Stream;
use crate::scalar::Scalar;

/// Anything that exposes named parameters.
pub trait ParamSet<F: Scalar> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ArrayD<F>)>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ArrayD<F>)>);

    fn params(&self) -> Vec<(String, &ArrayD<F>)> {
        let mut v = Vec::new();
        self.collect("", &mut v);
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut ArrayD<F>)> {
        let mut v = Vec::new();
        self.collect_mut("", &mut v);
        v
    }

    /// SHA-256 over name-sorted parameter bytes; the freeze fingerprint.
    fn fingerprint(&self) -> [u8; 32] {
        let mut entries = self.params();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let mut h = Sha256::new();
        for (name, arr) in entries {
            h.update(name.as_bytes());
            h.update([0u8]);
            for v in arr.iter() {
                h.update(v.as_f32().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Total parameter count.
    fn n_params(&self) -> usize {
        self.params().iter().map(|(_, a)| a.len()).sum()
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Bound model: name → tape leaf.
pub struct Bound {
    map: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.map.iter()
    }
}

/// Leases a model's parameters onto the tape. `trainable` selects between
/// differentiable leaves and constants.
pub fn bind<F: Scalar, M: ParamSet<F> + ?Sized>(
    g: &mut Graph<F>,
    model: &M,
    trainable: bool,
) -> Bound {
    let mut map = BTreeMap::new();
    for (name, p) in model.params() {
        let v = if trainable {
            g.param(p.clone())
        } else {
            g.constant(p.clone())
        };
        map.insert(name, v);
    }
    Bound { map }
}

/// Pulls the gradients of a bound model out of a finished backward pass.
pub fn collect_grads<F: Scalar>(bound: &Bound, grads: &mut Gradients<F>) -> BTreeMap<String, ArrayD<F>> {
    let mut out = BTreeMap::new();
    for (name, var) in bound.iter() {
        if let Some(gr) = grads.take(*var) {
            out.insert(name.clone(), gr);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// Fully connected layer, weight `[out, in]`.
pub struct Linear<F: Scalar> {
    pub w: ArrayD<F>,
    pub b: Option<ArrayD<F>>,
}

impl<F: Scalar> Linear<F> {
    /// He-style init scaled for leaky activations.
    pub fn init(rng: &mut Stream, n_in: usize, n_out: usize, gain: f64) -> Self {
        let std = gain / (n_in as f64).sqrt();
        let w = ArrayD::from_shape_fn(IxDyn(&[n_out, n_in]), |_| {
            F::from_f64(rng.normal() * std)
        });
        Linear {
            w,
            b: Some(ArrayD::zeros(IxDyn(&[n_out]))),
        }
    }

    pub fn init_no_bias(rng: &mut Stream, n_in: usize, n_out: usize, gain: f64) -> Self {
        let mut l = Self::init(rng, n_in, n_out, gain);
        l.b = None;
        l
    }

    /// Zero weights and bias (used where the contract wants zero outputs at init).
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Linear {
            w: ArrayD::zeros(IxDyn(&[n_out, n_in])),
            b: Some(ArrayD::zeros(IxDyn(&[n_out]))),
        }
    }

    /// `x [N, in] → [N, out]`.
    pub fn fwd(&self, g: &mut Graph<F>, bnd: &Bound, prefix: &str, x: Var) -> Var {
        let w = bnd.var(&join(prefix, "w"));
        let y = g.matmul(x, w, false, true);
        match &self.b {
            Some(_) => {
                let b = bnd.var(&join(prefix, "b"));
                g.add_bias_last(y, b)
            }
            None => y,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[0]
    }
}

impl<F: Scalar> ParamSet<F> for Linear<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ArrayD<F>)>) {
        out.push((join(prefix, "w"), &self.w));
        if let Some(b) = &self.b {
            out.push((join(prefix, "b"), b));
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ArrayD<F>)>) {
        out.push((join(prefix, "w"), &mut self.w));
        if let Some(b) = &mut self.b {
            out.push((join(prefix, "b"), b));
        }
    }
}

/// Plain convolution layer, weight `[out, in, k, k]`.
pub struct Conv<F: Scalar> {
    pub w: ArrayD<F>,
    pub b: Option<ArrayD<F>>,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Scalar> Conv<F> {
    pub fn init(
        rng: &mut Stream,
        n_in: usize,
        n_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        gain: f64,
    ) -> Self {
        let std = gain / ((n_in * k * k) as f64).sqrt();
        let w = ArrayD::from_shape_fn(IxDyn(&[n_out, n_in, k, k]), |_| {
            F::from_f64(rng.normal() * std)
        });
        Conv {
            w,
            b: Some(ArrayD::zeros(IxDyn(&[n_out]))),
            stride,
            pad,
        }
    }

    pub fn fwd(&self, g: &mut Graph<F>, bnd: &Bound, prefix: &str, x: Var) -> Var {
        let w = bnd.var(&join(prefix, "w"));
        let y = g.conv2d(x, w, self.stride, self.pad);
        match &self.b {
            Some(_) => {
                let b = bnd.var(&join(prefix, "b"));
                g.add_bias_chan(y, b)
            }
            None => y,
        }
    }
}

impl<F: Scalar> ParamSet<F> for Conv<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ArrayD<F>)>) {
        out.push((join(prefix, "w"), &self.w));
        if let Some(b) = &self.b {
            out.push((join(prefix, "b"), b));
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ArrayD<F>)>) {
        out.push((join(prefix, "w"), &mut self.w));
        if let Some(b) = &mut self.b {
            out.push((join(prefix, "b"), b));
        }
    }
}

/// Affine layer-norm parameters over a trailing feature axis.
pub struct LayerNorm<F: Scalar> {
    pub gamma: ArrayD<F>,
    pub beta: ArrayD<F>,
    pub eps: f64,
}

impl<F: Scalar> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: ArrayD::ones(IxDyn(&[dim])),
            beta: ArrayD::zeros(IxDyn(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn fwd(&self, g: &mut Graph<F>, bnd: &Bound, prefix: &str, x: Var) -> Var {
        let gamma = bnd.var(&join(prefix, "g"));
        let beta = bnd.var(&join(prefix, "b"));
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

impl<F: Scalar> ParamSet<F> for LayerNorm<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ArrayD<F>)>) {
        out.push((join(prefix, "g"), &self.gamma));
        out.push((join(prefix, "b"), &self.beta));
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ArrayD<F>)>) {
        out.push((join(prefix, "g"), &mut self.gamma));
        out.push((join(prefix, "b"), &mut self.beta));
    }
}


/// L2-normalises rows of `x [N, D]` with an epsilon inside the square root.
pub fn l2_normalize_rows<F: Scalar>(g: &mut Graph<F>, x: Var) -> Var {
    let sq = g.square(x);
    let ss = g.sum_last(sq);
    let ss = g.add_scalar(ss, 1e-12);
    let norm = g.sqrt(ss);
    let inv = g.powf(norm, -1.0);
    g.mul_rows(x, inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcheck::max_rel_grad_err;
    use ndarray::Array2;

    #[test]
    fn linear_fwd_matches_manual() {
        let mut rng = Stream::master(0);
        let lin = Linear::<f64>::init(&mut rng, 3, 2, 1.0);
        let mut g = Graph::new();
        let bnd = bind(&mut g, &lin, false);
        let x = g.constant(Array2::from_shape_fn((1, 3), |(_, j)| j as f64).into_dyn());
        let y = lin.fwd(&mut g, &bnd, "", x);
        let manual = lin.w[[0, 1]] + 2.0 * lin.w[[0, 2]];
        assert!((g.value(y)[[0, 0]] - manual).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_rows_gradcheck() {
        let x = Array2::from_shape_fn((2, 4), |(i, j)| 0.3 + i as f64 - 0.2 * j as f64).into_dyn();
        let coef = Array2::from_shape_fn((2, 4), |(i, j)| 1.0 + (i * 4 + j) as f64 * 0.37).into_dyn();
        let mut build = move |g: &mut Graph<f64>, vs: &[crate::autodiff::Var]| {
            let n = l2_normalize_rows(g, vs[0]);
            let w = g.mul_mask(n, coef.clone());
            g.sum_all(w)
        };
        let err = max_rel_grad_err(&mut build, &[x], 0, &[], 1e-6);
        assert!(err < 1e-5, "err {err}");
    }
}
