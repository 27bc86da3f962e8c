//! Training losses: adversarial D/G terms, R1 penalty, identity cosine loss,
//! landmark loss, MS-SSIM + L1 mix, gated reconstruction, weighted total.
//!
//! Each loss has two entry points: a graph builder (`*_g`) used by training,
//! and a plain evaluator over arrays for metrics/tests. The total combines
//! the non-adversarial terms; the adversarial generator term runs on its own
//! optimiser path and carries its own weight.

use ndarray::{ArrayD, ArrayView1, IxDyn};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::LandmarkSet;

/// Scalar coefficients for the weighted total and the adversarial step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_id: f64,
    pub lambda_lnd: f64,
    pub lambda_rec: f64,
    pub lambda_adv: f64,
    /// MS-SSIM share of the mix loss, in [0, 1].
    pub alpha: f64,
    pub r1_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        // λ1..λ4 and α defaults; R1 weight is a standard setting.
        LossWeights {
            lambda_id: 1.0,
            lambda_lnd: 1.0,
            lambda_adv: 0.0001,
            lambda_rec: 0.02,
            alpha: 0.84,
            r1_gamma: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_id,
            self.lambda_lnd,
            self.lambda_rec,
            self.lambda_adv,
            self.r1_gamma,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::argument("loss weights must be finite and nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::argument("alpha must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Named loss terms for one step; `total` must recombine from the terms.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub step: u64,
    pub terms: Vec<(&'static str, f64)>,
    pub total: f64,
}

impl LossReport {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }

    /// One tab-separated line: step, each term, total.
    pub fn tsv_line(&self) -> String {
        let mut s = format!("{}", self.step);
        for (_, v) in &self.terms {
            s.push('\t');
            s.push_str(&format!("{v:.9e}"));
        }
        s.push('\t');
        s.push_str(&format!("{:.9e}", self.total));
        s
    }

    pub fn tsv_header(&self) -> String {
        let mut s = "step".to_string();
        for (n, _) in &self.terms {
            s.push('\t');
            s.push_str(n);
        }
        s.push_str("\ttotal");
        s
    }
}

// ---------------------------------------------------------------------------
// Adversarial losses (logistic, with the non-saturating generator form)
// ---------------------------------------------------------------------------

/// Discriminator loss `-½·E[log σ(real)] − ½·E[log(1 − σ(fake))]`.
///
/// Graph form: logits are `[N]` vectors.
pub fn adv_d_loss_g<F: Scalar>(g: &mut Graph<F>, real_logits: Var, fake_logits: Var) -> Var {
    // -log σ(x) = softplus(-x);  -log(1-σ(x)) = softplus(x)
    let nr = g.neg(real_logits);
    let sp_real = g.softplus(nr);
    let real_term = g.mean_all(sp_real);
    let sp_fake = g.softplus(fake_logits);
    let fake_term = g.mean_all(sp_fake);
    let sum = g.add(real_term, fake_term);
    g.scale(sum, 0.5)
}

pub fn adv_d_loss(real_logits: &[f64], fake_logits: &[f64]) -> Result<f64> {
    if real_logits.is_empty() || fake_logits.is_empty() {
        return Err(Error::argument("adversarial loss needs nonempty batches"));
    }
    let mut g = Graph::<f64>::new();
    let r = g.constant(ArrayD::from_shape_vec(IxDyn(&[real_logits.len()]), real_logits.to_vec()).unwrap());
    let f = g.constant(ArrayD::from_shape_vec(IxDyn(&[fake_logits.len()]), fake_logits.to_vec()).unwrap());
    let l = adv_d_loss_g(&mut g, r, f);
    Ok(g.scalar(l))
}

/// Generator adversarial loss. Non-saturating by default: `-E[log σ(fake)]`;
/// the saturating variant `½·E[log(1 − σ(fake))]` is kept behind a switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GanGLoss {
    #[default]
    NonSaturating,
    Saturating,
}

pub fn adv_g_loss_g<F: Scalar>(g: &mut Graph<F>, fake_logits: Var, form: GanGLoss) -> Var {
    match form {
        GanGLoss::NonSaturating => {
            let nf = g.neg(fake_logits);
            let sp = g.softplus(nf);
            g.mean_all(sp)
        }
        GanGLoss::Saturating => {
            // ½·E[log(1-σ(x))] = -½·E[softplus(x)]
            let sp = g.softplus(fake_logits);
            let m = g.mean_all(sp);
            g.scale(m, -0.5)
        }
    }
}

pub fn adv_g_loss(fake_logits: &[f64], form: GanGLoss) -> Result<f64> {
    if fake_logits.is_empty() {
        return Err(Error::argument("adversarial loss needs nonempty batches"));
    }
    let mut g = Graph::<f64>::new();
    let f = g.constant(ArrayD::from_shape_vec(IxDyn(&[fake_logits.len()]), fake_logits.to_vec()).unwrap());
    let l = adv_g_loss_g(&mut g, f, form);
    Ok(g.scalar(l))
}

/// `(γ/2) · mean_b ‖∇_input d(input_b)‖²` evaluated on real samples only.
///
/// The discriminator is supplied as a graph builder so the input gradient is
/// produced by an ordinary backward pass; this evaluator serves metrics and
/// oracle tests. The differentiable-through-parameters variant used by
/// training lives on the discriminator itself, which knows how to express
/// its own input gradient as a first-order graph.
pub fn r1_penalty<D>(d: D, real_batch: &[ArrayD<f64>], gamma: f64) -> Result<f64>
where
    D: Fn(&mut Graph<f64>, Var) -> Var,
{
    if real_batch.is_empty() {
        return Err(Error::argument("r1 penalty needs a nonempty batch"));
    }
    if gamma == 0.0 {
        return Ok(0.0);
    }
    let mut acc = 0.0f64;
    for sample in real_batch {
        let mut g = Graph::<f64>::new();
        let x = g.param(sample.clone());
        let logit = d(&mut g, x);
        let grads = g.backward(logit);
        let gnorm2: f64 = grads
            .get(x)
            .map(|gr| gr.iter().map(|v| v * v).sum())
            .unwrap_or(0.0);
        if !gnorm2.is_finite() {
            return Err(Error::numeric("non-finite discriminator input gradient"));
        }
        acc += gnorm2;
    }
    Ok(gamma / 2.0 * acc / real_batch.len() as f64)
}

// ---------------------------------------------------------------------------
// Identity & landmark losses
// ---------------------------------------------------------------------------

/// `1 − ⟨src, out⟩` for unit-norm embeddings; range [0, 2].
pub fn id_loss(src: ArrayView1<f64>, out: ArrayView1<f64>) -> Result<f64> {
    let ns: f64 = src.iter().map(|v| v * v).sum::<f64>().sqrt();
    let no: f64 = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ns < 1e-12 || no < 1e-12 {
        return Err(Error::argument("id_loss embeddings must have nonzero norm"));
    }
    let dot: f64 = src.iter().zip(out.iter()).map(|(a, b)| a * b).sum();
    Ok(1.0 - dot / (ns * no))
}

/// Graph form over batches `[N, D]` of unit-norm embeddings:
/// `mean_b (1 − ⟨src_b, out_b⟩)`.
pub fn id_loss_g<F: Scalar>(g: &mut Graph<F>, src: Var, out: Var) -> Var {
    let prod = g.mul(src, out);
    let dots = g.sum_last(prod);
    let mean = g.mean_all(dots);
    let neg = g.neg(mean);
    g.add_scalar(neg, 1.0)
}

/// Euclidean norm of the flattened 136-d landmark difference.
pub fn landmark_loss(target: &LandmarkSet, out: &LandmarkSet) -> Result<f64> {
    if target.dim() != (68, 2) || out.dim() != (68, 2) {
        return Err(Error::shape("landmark sets must be 68×2"));
    }
    let mut acc = 0.0f64;
    for (a, b) in target.iter().zip(out.iter()) {
        let d = (*a - *b) as f64;
        acc += d * d;
    }
    Ok(acc.sqrt())
}

/// Graph form over batches `[N, 136]`: `mean_b ‖target_b − out_b‖₂`.
pub fn landmark_loss_g<F: Scalar>(g: &mut Graph<F>, target: Var, out: Var) -> Var {
    let diff = g.sub(target, out);
    let sq = g.square(diff);
    let ss = g.sum_last(sq);
    let ss = g.add_scalar(ss, 1e-12); // keep the sqrt differentiable at zero
    let norms = g.sqrt(ss);
    g.mean_all(norms)
}

// ---------------------------------------------------------------------------
// MS-SSIM and the mix/reconstruction losses
// ---------------------------------------------------------------------------

/// 11-tap Gaussian window, σ = 1.5, normalised.
pub fn ssim_window() -> [f64; 11] {
    let sigma = 1.5f64;
    let mut k = [0.0; 11];
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - 5.0;
        *v = (-x * x / (2.0 * sigma * sigma)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Per-scale exponent weights (standard five), truncated and renormalised to
/// the requested scale count.
pub fn msssim_weights(scales: usize) -> Vec<f64> {
    const BASE: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    assert!((1..=5).contains(&scales));
    let take = &BASE[..scales];
    let sum: f64 = take.iter().sum();
    take.iter().map(|w| w / sum).collect()
}

/// Largest scale count the image supports (each scale needs an 11×11 window).
pub fn max_scales(h: usize, w: usize) -> usize {
    let mut s = 0usize;
    let mut m = h.min(w);
    while m >= 11 && s < 5 {
        s += 1;
        m /= 2;
    }
    s.max(1)
}

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_RANGE: f64 = 2.0; // images live in [-1, 1], shifted to [0, 2]

/// MS-SSIM over `[N, C, H, W]` batches as a graph value in (0, 1].
///
/// Standard construction: per-scale contrast/structure means, luminance at
/// the coarsest scale, combined with the truncated exponent weights.
/// Contrast/structure terms are clamped at a small positive floor before
/// exponentiation.
pub fn ms_ssim_g<F: Scalar>(g: &mut Graph<F>, x: Var, y: Var, scales: usize) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    if shape != g.value(y).shape() {
        return Err(Error::shape("ms_ssim operands must agree in shape"));
    }
    let (h, w) = (shape[2], shape[3]);
    let min_side = 11 * (1usize << (scales - 1));
    if h.min(w) < min_side {
        return Err(Error::config(format!(
            "image {h}×{w} too small for {scales} SSIM scales (needs ≥ {min_side})"
        )));
    }
    let c1 = (SSIM_K1 * SSIM_RANGE) * (SSIM_K1 * SSIM_RANGE);
    let c2 = (SSIM_K2 * SSIM_RANGE) * (SSIM_K2 * SSIM_RANGE);
    let window: Vec<f64> = ssim_window().to_vec();
    let weights = msssim_weights(scales);

    // Shift to [0, 2] so luminance terms are well behaved.
    let mut xs = g.add_scalar(x, 1.0);
    let mut ys = g.add_scalar(y, 1.0);

    let blur = |g: &mut Graph<F>, v: Var, window: &[f64]| {
        let a = g.blur_axis(v, window, 2);
        g.blur_axis(a, window, 3)
    };

    let mut factors: Vec<Var> = Vec::with_capacity(scales + 1);
    for (si, &wexp) in weights.iter().enumerate() {
        let mu_x = blur(g, xs, &window);
        let mu_y = blur(g, ys, &window);
        let xx = g.mul(xs, xs);
        let yy = g.mul(ys, ys);
        let xy = g.mul(xs, ys);
        let exx = blur(g, xx, &window);
        let eyy = blur(g, yy, &window);
        let exy = blur(g, xy, &window);
        let mux2 = g.mul(mu_x, mu_x);
        let muy2 = g.mul(mu_y, mu_y);
        let muxy = g.mul(mu_x, mu_y);
        let var_x = g.sub(exx, mux2);
        let var_y = g.sub(eyy, muy2);
        let cov = g.sub(exy, muxy);

        // cs = (2σxy + C2) / (σx² + σy² + C2)
        let num = {
            let t = g.scale(cov, 2.0);
            g.add_scalar(t, c2)
        };
        let den = {
            let t = g.add(var_x, var_y);
            g.add_scalar(t, c2)
        };
        let inv_den = g.powf(den, -1.0);
        let cs = g.mul(num, inv_den);
        let cs_mean = g.mean_all(cs);
        let cs_mean = g.max_scalar(cs_mean, 1e-4);

        if si + 1 == scales {
            // luminance at the coarsest scale
            let lnum = {
                let t = g.scale(muxy, 2.0);
                g.add_scalar(t, c1)
            };
            let lden = {
                let t = g.add(mux2, muy2);
                g.add_scalar(t, c1)
            };
            let linv = g.powf(lden, -1.0);
            let lum = g.mul(lnum, linv);
            let lum_mean = g.mean_all(lum);
            let lum_mean = g.max_scalar(lum_mean, 1e-4);
            factors.push(g.powf(lum_mean, wexp));
            factors.push(g.powf(cs_mean, wexp));
        } else {
            factors.push(g.powf(cs_mean, wexp));
            xs = g.avg_pool2(xs);
            ys = g.avg_pool2(ys);
        }
    }
    let mut prod = factors[0];
    for f in &factors[1..] {
        prod = g.mul(prod, *f);
    }
    Ok(prod)
}

/// Plain MS-SSIM over single images `[3, H, W]`.
pub fn ms_ssim(x: &crate::Image, y: &crate::Image, scales: usize) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::shape("ms_ssim operands must agree in shape"));
    }
    let (c, h, w) = x.dim();
    let to_dyn = |im: &crate::Image| {
        ArrayD::from_shape_vec(
            IxDyn(&[1, c, h, w]),
            im.iter().map(|&v| v as f64).collect(),
        )
        .unwrap()
    };
    let mut g = Graph::<f64>::new();
    let xv = g.constant(to_dyn(x));
    let yv = g.constant(to_dyn(y));
    let v = ms_ssim_g(&mut g, xv, yv, scales)?;
    Ok(g.scalar(v))
}

/// `α·(1 − MS-SSIM) + (1 − α)·mean|target − out|`.
pub fn mix_loss_g<F: Scalar>(
    g: &mut Graph<F>,
    target: Var,
    out: Var,
    alpha: f64,
    scales: usize,
) -> Result<Var> {
    let ms = ms_ssim_g(g, target, out, scales)?;
    let neg = g.neg(ms);
    let dis = g.add_scalar(neg, 1.0);
    let dis = g.scale(dis, alpha);
    let diff = g.sub(target, out);
    let l1 = g.abs(diff);
    let l1 = g.mean_all(l1);
    let l1 = g.scale(l1, 1.0 - alpha);
    Ok(g.add(dis, l1))
}

pub fn mix_loss(target: &crate::Image, out: &crate::Image, alpha: f64) -> Result<f64> {
    if target.dim() != out.dim() {
        return Err(Error::shape("mix_loss operands must agree in shape"));
    }
    let (c, h, w) = target.dim();
    let scales = max_scales(h, w);
    let to_dyn = |im: &crate::Image| {
        ArrayD::from_shape_vec(IxDyn(&[1, c, h, w]), im.iter().map(|&v| v as f64).collect())
            .unwrap()
    };
    let mut g = Graph::<f64>::new();
    let t = g.constant(to_dyn(target));
    let o = g.constant(to_dyn(out));
    let v = mix_loss_g(&mut g, t, o, alpha, scales)?;
    Ok(g.scalar(v))
}

/// Reconstruction gate: the mix loss when source and target coincide, else an
/// exact zero that contributes no gradient (the mix graph is not even built).
pub fn rec_loss_g<F: Scalar>(
    g: &mut Graph<F>,
    target: Var,
    out: Var,
    same_flag: bool,
    alpha: f64,
    scales: usize,
) -> Result<Var> {
    if same_flag {
        mix_loss_g(g, target, out, alpha, scales)
    } else {
        Ok(g.lit(0.0))
    }
}

pub fn rec_loss(target: &crate::Image, out: &crate::Image, same_flag: bool, alpha: f64) -> Result<f64> {
    if same_flag {
        mix_loss(target, out, alpha)
    } else {
        if target.dim() != out.dim() {
            return Err(Error::shape("rec_loss operands must agree in shape"));
        }
        Ok(0.0)
    }
}

/// Non-adversarial total: `λ_id·L_id + λ_lnd·L_lnd + λ_rec·L_rec`.
pub fn total_loss(id: f64, lnd: f64, rec: f64, w: &LossWeights) -> Result<f64> {
    let t = w.lambda_id * id + w.lambda_lnd * lnd + w.lambda_rec * rec;
    if !t.is_finite() {
        return Err(Error::numeric("non-finite loss total"));
    }
    Ok(t)
}

pub fn total_loss_g<F: Scalar>(g: &mut Graph<F>, id: Var, lnd: Var, rec: Var, w: &LossWeights) -> Var {
    let a = g.scale(id, w.lambda_id);
    let b = g.scale(lnd, w.lambda_lnd);
    let c = g.scale(rec, w.lambda_rec);
    let ab = g.add(a, b);
    g.add(ab, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array3};

    #[test]
    fn adv_losses_at_zero_logits_equal_log2() {
        let d = adv_d_loss(&[0.0, 0.0], &[0.0]).unwrap();
        assert!((d - std::f64::consts::LN_2).abs() < 1e-12);
        let gl = adv_g_loss(&[0.0, 0.0, 0.0], GanGLoss::NonSaturating).unwrap();
        assert!((gl - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_discriminator_drives_losses_to_zero() {
        let d = adv_d_loss(&[30.0], &[-30.0]).unwrap();
        assert!(d < 1e-9, "{d}");
        let gl = adv_g_loss(&[30.0], GanGLoss::NonSaturating).unwrap();
        assert!(gl < 1e-9, "{gl}");
    }

    #[test]
    fn empty_batches_are_argument_errors() {
        assert!(adv_d_loss(&[], &[0.0]).is_err());
        assert!(adv_g_loss(&[], GanGLoss::NonSaturating).is_err());
    }

    #[test]
    fn id_loss_reference_points() {
        let e0 = arr1(&[1.0, 0.0]);
        let e1 = arr1(&[0.0, 1.0]);
        let ne0 = arr1(&[-1.0, 0.0]);
        assert!((id_loss(e0.view(), e0.view()).unwrap() - 0.0).abs() < 1e-12);
        assert!((id_loss(e0.view(), e1.view()).unwrap() - 1.0).abs() < 1e-12);
        assert!((id_loss(e0.view(), ne0.view()).unwrap() - 2.0).abs() < 1e-12);
        assert!(id_loss(e0.view(), arr1(&[0.0, 0.0]).view()).is_err());
    }

    #[test]
    fn landmark_loss_reference_points() {
        let a = LandmarkSet::zeros((68, 2));
        assert_eq!(landmark_loss(&a, &a).unwrap(), 0.0);

        let mut b = a.clone();
        b[(7, 0)] = 3.0;
        b[(7, 1)] = 4.0;
        assert!((landmark_loss(&a, &b).unwrap() - 5.0).abs() < 1e-6);

        let mut c = a.clone();
        for i in 0..68 {
            c[(i, 0)] = 3.0;
            c[(i, 1)] = 4.0;
        }
        let expect = 5.0 * (68.0f64).sqrt();
        assert!((landmark_loss(&a, &c).unwrap() - expect).abs() < 1e-4);
    }

    #[test]
    fn msssim_self_similarity_is_one() {
        let img = Array3::from_shape_fn((3, 64, 64), |(c, y, x)| {
            (((x * 7 + y * 3 + c * 11) % 23) as f32 / 11.5) - 1.0
        });
        let v = ms_ssim(&img, &img, 3).unwrap();
        assert!((v - 1.0).abs() < 1e-6, "{v}");
    }

    #[test]
    fn msssim_constant_images_match_closed_form() {
        // For constant images every contrast/structure term is exactly 1 and
        // the value reduces to the coarsest-scale luminance term.
        let c1v = 0.3f32;
        let c2v = -0.2f32;
        let a = Array3::from_elem((3, 64, 64), c1v);
        let b = Array3::from_elem((3, 64, 64), c2v);
        let scales = 3;
        let v = ms_ssim(&a, &b, scales).unwrap();
        let (m1, m2) = ((c1v as f64) + 1.0, (c2v as f64) + 1.0);
        let c1 = (SSIM_K1 * SSIM_RANGE) * (SSIM_K1 * SSIM_RANGE);
        let lum = (2.0 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1);
        let expect = lum.powf(msssim_weights(scales)[scales - 1]);
        assert!((v - expect).abs() < 1e-9, "got {v}, want {expect}");
    }

    #[test]
    fn mix_loss_weights_recombine() {
        let a = Array3::from_shape_fn((3, 64, 64), |(c, y, x)| {
            ((x + y + c) as f32 / 70.0).sin() * 0.8
        });
        let b = a.mapv(|v| (v * 0.9 - 0.05).clamp(-1.0, 1.0));
        let alpha = 0.84;
        let mix = mix_loss(&a, &b, alpha).unwrap();
        let ms = ms_ssim(&a, &b, 3).unwrap();
        let l1: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (*x as f64 - *y as f64).abs())
            .sum::<f64>()
            / a.len() as f64;
        let expect = alpha * (1.0 - ms) + (1.0 - alpha) * l1;
        assert!((mix - expect).abs() < 1e-9);

        // degenerate weighting: pure L1
        let c = Array3::from_elem((3, 64, 64), 0.25f32);
        let d = Array3::from_elem((3, 64, 64), -0.25f32);
        let pure_l1 = mix_loss(&c, &d, 0.0).unwrap();
        assert!((pure_l1 - 0.5).abs() < 1e-7, "{pure_l1}");
    }

    #[test]
    fn rec_loss_gate() {
        let a = Array3::from_elem((3, 64, 64), 0.4f32);
        let b = Array3::from_elem((3, 64, 64), -0.1f32);
        assert_eq!(rec_loss(&a, &b, false, 0.84).unwrap(), 0.0);
        let open = rec_loss(&a, &b, true, 0.84).unwrap();
        let mix = mix_loss(&a, &b, 0.84).unwrap();
        assert_eq!(open, mix);
    }

    #[test]
    fn total_loss_reference_points() {
        let w0 = LossWeights {
            lambda_id: 0.0,
            lambda_lnd: 0.0,
            lambda_rec: 0.0,
            ..Default::default()
        };
        assert_eq!(total_loss(9.0, 5.0, 3.0, &w0).unwrap(), 0.0);
        let w1 = LossWeights {
            lambda_id: 1.0,
            lambda_lnd: 1.0,
            lambda_rec: 1.0,
            ..Default::default()
        };
        assert!((total_loss(0.2, 0.3, 0.5, &w1).unwrap() - 1.0).abs() < 1e-12);
        assert!(total_loss(f64::NAN, 0.0, 0.0, &w1).is_err());
    }

    #[test]
    fn r1_closed_forms() {
        // constant discriminator -> 0
        let batch = vec![ArrayD::from_elem(IxDyn(&[4]), 0.7f64)];
        let v = r1_penalty(|g, _x| g.lit(3.0), &batch, 10.0).unwrap();
        assert_eq!(v, 0.0);

        // linear discriminator d(x) = a·x -> (γ/2)·‖a‖²
        let a = arr1(&[1.0, -2.0, 3.0, 0.5]).into_dyn();
        let a2: f64 = a.iter().map(|v| v * v).sum();
        let gamma = 4.0;
        let an = a.clone();
        let v = r1_penalty(
            move |g, x| {
                let av = g.constant(an.clone());
                let p = g.mul(av, x);
                g.sum_all(p)
            },
            &batch,
            gamma,
        )
        .unwrap();
        assert!((v - gamma / 2.0 * a2).abs() < 1e-12);

        // gamma = 0 -> 0 for any d
        let v = r1_penalty(|g, x| g.sum_all(x), &batch, 0.0).unwrap();
        assert_eq!(v, 0.0);
    }
}
