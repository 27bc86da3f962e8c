//! Toy style-based generator: a latent mapping network feeding a synthesis
//! stack of weight-demodulated modulated convolutions with skip-connection
//! RGB accumulation, plus the image discriminator and training loop used to
//! pretrain it on the procedural corpus. Once pretrained the generator is
//! frozen for the rest of the pipeline.
//!
//! Style layout: each resolution block consumes exactly two style rows, so a
//! resolution-`R` generator takes `log2(R)·2 − 2` rows. The 4×4 block feeds
//! its conv and RGB head from rows 0 and 1; every later block feeds its two
//! convs from rows `2k`/`2k+1` and reuses row `2k+1` for its RGB head.
//!
//! Noise inputs are per-layer seeded constants with a learned strength, so
//! synthesis is deterministic given the styles.

use ndarray::{Array2, Array3, Array4, ArrayD, Axis, IxDyn};

use crate::adam::Adam;
use crate::autodiff::{Graph, Var};
use crate::checkpoint::{Container, MAGIC_GENERATOR};
use crate::error::{Error, Result};
use crate::losses::{self, GanGLoss};
use crate::nn::{bind, collect_grads, Bound, Linear, ParamSet};
use crate::procfaces::Corpus;
use crate::rng::{tag, Stream};
use crate::scalar::Scalar;
use crate::Image;

pub const LATENT_DIM: usize = 512;
const LRELU_SLOPE: f64 = 0.2;
const ACT_GAIN: f64 = std::f64::consts::SQRT_2;

/// `log2(resolution)·2 − 2` style rows; resolution must be a power of two ≥ 4.
pub fn num_styles(resolution: usize) -> Result<usize> {
    if resolution < 4 || !resolution.is_power_of_two() {
        return Err(Error::config(format!(
            "resolution must be a power of two ≥ 4, got {resolution}"
        )));
    }
    Ok(resolution.trailing_zeros() as usize * 2 - 2)
}

/// Feature widths per block resolution.
fn block_channels(resolution: usize) -> usize {
    match resolution {
        4 => 128,
        8 => 96,
        16 => 64,
        32 => 32,
        64 => 16,
        _ => 8,
    }
}

/// Standard-normal latents, `[batch, 512]`.
pub fn sample_z<F: Scalar>(stream: &mut Stream, batch: usize) -> Array2<F> {
    Array2::from_shape_fn((batch, LATENT_DIM), |_| stream.normal_as())
}

/// The extended style code: one 512-d row per modulation site.
#[derive(Debug, Clone, PartialEq)]
pub struct StylePlus {
    pub styles: Array2<f32>,
    pub resolution: usize,
}

impl StylePlus {
    pub fn new(styles: Array2<f32>, resolution: usize) -> Result<Self> {
        let s = num_styles(resolution)?;
        if styles.dim() != (s, LATENT_DIM) {
            return Err(Error::shape(format!(
                "style matrix {:?} does not match {s}×{LATENT_DIM} for resolution {resolution}",
                styles.dim()
            )));
        }
        Ok(StylePlus { styles, resolution })
    }

    pub fn num_rows(&self) -> usize {
        self.styles.nrows()
    }

    /// Flattened `S·512` vector (discriminator input layout).
    pub fn flatten(&self) -> Vec<f32> {
        self.styles.iter().copied().collect()
    }

    pub fn unflatten(flat: &[f32], resolution: usize) -> Result<Self> {
        let s = num_styles(resolution)?;
        if flat.len() != s * LATENT_DIM {
            return Err(Error::shape("flattened style length mismatch"));
        }
        Ok(StylePlus {
            styles: Array2::from_shape_vec((s, LATENT_DIM), flat.to_vec()).unwrap(),
            resolution,
        })
    }
}

/// Replicates a single `w` into every extended-space row.
pub fn broadcast(w: &[f32], resolution: usize) -> Result<StylePlus> {
    if w.len() != LATENT_DIM {
        return Err(Error::shape("w must be 512-d"));
    }
    let s = num_styles(resolution)?;
    let styles = Array2::from_shape_fn((s, LATENT_DIM), |(_, j)| w[j]);
    StylePlus::new(styles, resolution)
}

// ---------------------------------------------------------------------------
// Modulated convolution
// ---------------------------------------------------------------------------

struct ModConv<F: Scalar> {
    affine: Linear<F>,
    weight: ArrayD<F>, // [O, I, k, k]
    bias: ArrayD<F>,   // [O]
    noise_strength: Option<ArrayD<F>>,
    noise: Option<ArrayD<F>>, // fixed [res, res] buffer
    demodulate: bool,
    up: bool,
    k: usize,
}

impl<F: Scalar> ModConv<F> {
    fn init(
        rng: &mut Stream,
        n_in: usize,
        n_out: usize,
        k: usize,
        demodulate: bool,
        up: bool,
        noise_res: Option<usize>,
    ) -> Self {
        let mut affine = Linear::init(rng, LATENT_DIM, n_in, 1.0);
        // Styles start at identity modulation.
        if let Some(b) = &mut affine.b {
            b.fill(F::one());
        }
        let std = 1.0 / ((n_in * k * k) as f64).sqrt();
        let weight = ArrayD::from_shape_fn(IxDyn(&[n_out, n_in, k, k]), |_| {
            F::from_f64(rng.normal() * std)
        });
        let (noise, noise_strength) = match noise_res {
            Some(r) => (
                Some(ArrayD::from_shape_fn(IxDyn(&[r, r]), |_| {
                    F::from_f64(rng.normal())
                })),
                Some(ArrayD::zeros(IxDyn(&[]))),
            ),
            None => (None, None),
        };
        ModConv {
            affine,
            weight,
            bias: ArrayD::zeros(IxDyn(&[n_out])),
            noise_strength,
            noise,
            demodulate,
            up,
            k,
        }
    }

    /// `x [B, I, h, w]`, `w_row [B, 512]` → `[B, O, h', w']`.
    fn fwd(&self, g: &mut Graph<F>, bnd: &Bound, prefix: &str, x: Var, w_row: Var) -> Var {
        let s = self.affine.fwd(g, bnd, &format!("{prefix}.affine"), w_row); // [B, I]
        let mut x = g.mul_channels(x, s);
        if self.up {
            x = g.upsample2(x);
        }
        let weight = bnd.var(&format!("{prefix}.w"));
        let pad = self.k / 2;
        let mut y = g.conv2d(x, weight, 1, pad);
        if self.demodulate {
            // d[b,o] = (Σ_i s²[b,i] · Σ_k w²[o,i,k] + ε)^(-1/2)
            let (o, i) = (self.weight.shape()[0], self.weight.shape()[1]);
            let s2 = g.square(s);
            let w2 = g.square(weight);
            let w2 = g.reshape(w2, &[o, i, self.k * self.k]);
            let q = g.sum_last(w2); // [O, I]
            let denom = g.matmul(s2, q, false, true); // [B, O]
            let denom = g.add_scalar(denom, 1e-8);
            let d = g.powf(denom, -0.5);
            y = g.mul_channels(y, d);
        }
        if let (Some(_), Some(noise)) = (&self.noise_strength, &self.noise) {
            let strength = bnd.var(&format!("{prefix}.noise_strength"));
            y = g.add_scaled_broadcast(y, strength, noise.clone());
        }
        let bias = bnd.var(&format!("{prefix}.b"));
        g.add_bias_chan(y, bias)
    }
}

impl<F: Scalar> ParamSet<F> for ModConv<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ArrayD<F>)>) {
        self.affine.collect(&format!("{prefix}.affine"), out);
        out.push((format!("{prefix}.w"), &self.weight));
        out.push((format!("{prefix}.b"), &self.bias));
        if let Some(ns) = &self.noise_strength {
            out.push((format!("{prefix}.noise_strength"), ns));
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ArrayD<F>)>) {
        self.affine.collect_mut(&format!("{prefix}.affine"), out);
        out.push((format!("{prefix}.w"), &mut self.weight));
        out.push((format!("{prefix}.b"), &mut self.bias));
        if let Some(ns) = &mut self.noise_strength {
            out.push((format!("{prefix}.noise_strength"), ns));
        }
    }
}

struct SynthBlock<F: Scalar> {
    resolution: usize,
    conv0: Option<ModConv<F>>, // upsampling conv; absent on the 4×4 block
    conv1: ModConv<F>,
    torgb: ModConv<F>,
}

/// Mapping network + synthesis stack.
pub struct Generator<F: Scalar> {
    pub resolution: usize,
    mapping: Vec<Linear<F>>,
    const_input: ArrayD<F>, // [C, 4, 4]
    blocks: Vec<SynthBlock<F>>,
}

impl<F: Scalar> ParamSet<F> for Generator<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ArrayD<F>)>) {
        for (i, l) in self.mapping.iter().enumerate() {
            l.collect(&format!("{prefix}map.l{i}"), out);
        }
        out.push((format!("{prefix}syn.const"), &self.const_input));
        for b in &self.blocks {
            let bp = format!("{prefix}syn.b{}", b.resolution);
            if let Some(c0) = &b.conv0 {
                c0.collect(&format!("{bp}.conv0"), out);
            }
            b.conv1.collect(&format!("{bp}.conv1"), out);
            b.torgb.collect(&format!("{bp}.torgb"), out);
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ArrayD<F>)>) {
        for (i, l) in self.mapping.iter_mut().enumerate() {
            l.collect_mut(&format!("{prefix}map.l{i}"), out);
        }
        out.push((format!("{prefix}syn.const"), &mut self.const_input));
        for b in &mut self.blocks {
            let bp = format!("{prefix}syn.b{}", b.resolution);
            if let Some(c0) = &mut b.conv0 {
                c0.collect_mut(&format!("{bp}.conv0"), out);
            }
            b.conv1.collect_mut(&format!("{bp}.conv1"), out);
            b.torgb.collect_mut(&format!("{bp}.torgb"), out);
        }
    }
}

impl<F: Scalar> Generator<F> {
    pub fn new(resolution: usize, seed: u64) -> Result<Self> {
        num_styles(resolution)?;
        let mut rng = Stream::split(seed, tag::INIT, 0xC0DE);
        let mapping = (0..4)
            .map(|_| Linear::init(&mut rng, LATENT_DIM, LATENT_DIM, 1.0))
            .collect();
        let c4 = block_channels(4);
        let const_input =
            ArrayD::from_shape_fn(IxDyn(&[c4, 4, 4]), |_| F::from_f64(rng.normal()));
        let mut blocks = Vec::new();
        let mut res = 4usize;
        let mut c_in = c4;
        while res <= resolution {
            let c_out = block_channels(res);
            let conv0 = if res == 4 {
                None
            } else {
                Some(ModConv::init(&mut rng, c_in, c_out, 3, true, true, Some(res)))
            };
            let conv1 = ModConv::init(&mut rng, c_out, c_out, 3, true, false, Some(res));
            let torgb = ModConv::init(&mut rng, c_out, 3, 1, false, false, None);
            blocks.push(SynthBlock {
                resolution: res,
                conv0,
                conv1,
                torgb,
            });
            c_in = c_out;
            res *= 2;
        }
        Ok(Generator {
            resolution,
            mapping,
            const_input,
            blocks,
        })
    }

    /// Fixed noise buffers (not trained, but persisted in the checkpoint).
    pub fn buffers(&self) -> Vec<(String, &ArrayD<F>)> {
        let mut out = Vec::new();
        for b in &self.blocks {
            let bp = format!("syn.b{}", b.resolution);
            if let Some(c0) = &b.conv0 {
                if let Some(n) = &c0.noise {
                    out.push((format!("{bp}.conv0.noise"), n));
                }
            }
            if let Some(n) = &b.conv1.noise {
                out.push((format!("{bp}.conv1.noise"), n));
            }
        }
        out
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut ArrayD<F>)> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            let bp = format!("syn.b{}", b.resolution);
            if let Some(c0) = &mut b.conv0 {
                if let Some(n) = &mut c0.noise {
                    out.push((format!("{bp}.conv0.noise"), n));
                }
            }
            if let Some(n) = &mut b.conv1.noise {
                out.push((format!("{bp}.conv1.noise"), n));
            }
        }
        out
    }

    pub fn num_styles(&self) -> usize {
        num_styles(self.resolution).expect("validated at construction")
    }

    /// Mapping network as a graph: `z [B, 512] → w [B, 512]`.
    pub fn map_g(&self, g: &mut Graph<F>, bnd: &Bound, z: Var) -> Var {
        // Second-moment normalisation of z.
        let sq = g.square(z);
        let ss = g.sum_last(sq);
        let ss = g.scale(ss, 1.0 / LATENT_DIM as f64);
        let ss = g.add_scalar(ss, 1e-8);
        let inv = g.powf(ss, -0.5);
        let mut x = g.mul_rows(z, inv);
        for i in 0..self.mapping.len() {
            x = self.mapping[i].fwd(g, bnd, &format!("map.l{i}"), x);
            x = g.leaky_relu(x, LRELU_SLOPE);
        }
        x
    }

    /// `w [B, 512]` replicated into `[B, S, 512]` as a graph value.
    pub fn broadcast_g(&self, g: &mut Graph<F>, w: Var) -> Var {
        let batch = g.value(w).shape()[0];
        let wr = g.reshape(w, &[batch, 1, LATENT_DIM]);
        let mut sp = wr;
        for _ in 1..self.num_styles() {
            sp = g.concat2(sp, wr, 1);
        }
        sp
    }

    /// Synthesis as a graph: styles `[B, S, 512] → [B, 3, R, R]`, tanh output.
    pub fn synthesize_g(&self, g: &mut Graph<F>, bnd: &Bound, styles: Var) -> Var {
        let shape = g.value(styles).shape().to_vec();
        assert_eq!(shape[1], self.num_styles(), "style-count mismatch");
        assert_eq!(shape[2], LATENT_DIM);
        let batch = shape[0];

        let style_row = |g: &mut Graph<F>, idx: usize| {
            let row = g.narrow(styles, 1, idx, 1);
            g.reshape(row, &[batch, LATENT_DIM])
        };

        // Learned constant input, replicated over the batch.
        let c4 = self.const_input.shape()[0];
        let cv = bnd.var("syn.const");
        let cv4 = g.reshape(cv, &[1, c4, 4, 4]);
        let mut x = cv4;
        for _ in 1..batch {
            x = g.concat2(x, cv4, 0);
        }

        let mut img: Option<Var> = None;
        let mut style_idx = 0usize;
        for block in &self.blocks {
            let bp = format!("syn.b{}", block.resolution);
            if let Some(conv0) = &block.conv0 {
                let s = style_row(g, style_idx);
                x = conv0.fwd(g, bnd, &format!("{bp}.conv0"), x, s);
                x = g.leaky_relu(x, LRELU_SLOPE);
                x = g.scale(x, ACT_GAIN);
                style_idx += 1;
            }
            let s = style_row(g, style_idx);
            x = block.conv1.fwd(g, bnd, &format!("{bp}.conv1"), x, s);
            x = g.leaky_relu(x, LRELU_SLOPE);
            x = g.scale(x, ACT_GAIN);
            // The block's second style row also modulates its RGB head (the
            // 4×4 block uses its dedicated second row).
            let rgb_idx = if block.resolution == 4 {
                style_idx + 1
            } else {
                style_idx
            };
            let sr = style_row(g, rgb_idx);
            let y = block.torgb.fwd(g, bnd, &format!("{bp}.torgb"), x, sr);
            img = Some(match img {
                None => y,
                Some(prev) => {
                    let up = g.upsample2(prev);
                    g.add(up, y)
                }
            });
            style_idx = rgb_idx + 1;
        }
        debug_assert_eq!(style_idx, self.num_styles());
        g.tanh(img.expect("at least one block"))
    }

    /// Inference: `z → w` rows.
    pub fn map_z_to_w(&self, z: &Array2<F>) -> Array2<F> {
        let mut g = Graph::new();
        let bnd = bind(&mut g, self, false);
        let zv = g.constant(z.clone().into_dyn());
        let w = self.map_g(&mut g, &bnd, zv);
        g.value(w)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned()
    }

    /// Inference synthesis of a batch `[B, S, 512] → [B, 3, R, R]`.
    pub fn synthesize_batch(&self, styles: &Array3<F>) -> Result<Array4<F>> {
        if styles.shape()[1] != self.num_styles() || styles.shape()[2] != LATENT_DIM {
            return Err(Error::shape(format!(
                "styles {:?} do not match generator (S = {})",
                styles.shape(),
                self.num_styles()
            )));
        }
        let mut g = Graph::new();
        let bnd = bind(&mut g, self, false);
        let sv = g.constant(styles.clone().into_dyn());
        let img = self.synthesize_g(&mut g, &bnd, sv);
        Ok(g
            .value(img)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .to_owned())
    }

    /// Single-image synthesis from a [`StylePlus`].
    pub fn synthesize(&self, sp: &StylePlus) -> Result<Image> {
        if sp.resolution != self.resolution {
            return Err(Error::shape(format!(
                "style code targets resolution {}, generator is {}",
                sp.resolution, self.resolution
            )));
        }
        let styles = Array3::from_shape_fn((1, sp.styles.nrows(), LATENT_DIM), |(_, i, j)| {
            F::from_f32(sp.styles[(i, j)])
        });
        let out = self.synthesize_batch(&styles)?;
        Ok(out.index_axis(Axis(0), 0).mapv(|v| v.as_f32()))
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut c = Container::new(MAGIC_GENERATOR, self.resolution as u32);
        c.store_params(self.params(), "");
        for (name, buf) in self.buffers() {
            c.insert_array(name, buf);
        }
        c.write(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let c = Container::read(path, MAGIC_GENERATOR)?;
        let mut gen = Generator::new(c.resolution as usize, 0)?;
        c.load_into(gen.params_mut(), "")?;
        c.load_into(gen.buffers_mut(), "")?;
        Ok(gen)
    }
}

// ---------------------------------------------------------------------------
// Image discriminator (pretraining only)
// ---------------------------------------------------------------------------

struct DownStage<F: Scalar> {
    keep: crate::nn::Conv<F>, // 3×3 stride 1
    down: crate::nn::Conv<F>, // 3×3 stride 2
}

/// Convolutional critic over images; exposes both a plain logit graph and a
/// first-order graph of its own input-gradient norm (for the R1 penalty).
pub struct ImageDiscriminator<F: Scalar> {
    pub resolution: usize,
    from_rgb: crate::nn::Conv<F>,
    stages: Vec<DownStage<F>>,
    head1: Linear<F>,
    head2: Linear<F>,
}

impl<F: Scalar> ParamSet<F> for ImageDiscriminator<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ArrayD<F>)>) {
        self.from_rgb.collect(&format!("{prefix}d.rgb"), out);
        for (i, s) in self.stages.iter().enumerate() {
            s.keep.collect(&format!("{prefix}d.s{i}.keep"), out);
            s.down.collect(&format!("{prefix}d.s{i}.down"), out);
        }
        self.head1.collect(&format!("{prefix}d.h1"), out);
        self.head2.collect(&format!("{prefix}d.h2"), out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ArrayD<F>)>) {
        self.from_rgb.collect_mut(&format!("{prefix}d.rgb"), out);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.keep.collect_mut(&format!("{prefix}d.s{i}.keep"), out);
            s.down.collect_mut(&format!("{prefix}d.s{i}.down"), out);
        }
        self.head1.collect_mut(&format!("{prefix}d.h1"), out);
        self.head2.collect_mut(&format!("{prefix}d.h2"), out);
    }
}

impl<F: Scalar> ImageDiscriminator<F> {
    pub fn new(resolution: usize, seed: u64) -> Result<Self> {
        num_styles(resolution)?;
        let mut rng = Stream::split(seed, tag::INIT, 0xD15C);
        let gain = ACT_GAIN;
        let c0 = block_channels(resolution);
        let from_rgb = crate::nn::Conv::init(&mut rng, 3, c0, 1, 1, 0, gain);
        let mut stages = Vec::new();
        let mut res = resolution;
        let mut c_in = c0;
        while res > 4 {
            let c_out = block_channels(res / 2);
            stages.push(DownStage {
                keep: crate::nn::Conv::init(&mut rng, c_in, c_in, 3, 1, 1, gain),
                down: crate::nn::Conv::init(&mut rng, c_in, c_out, 3, 2, 1, gain),
            });
            c_in = c_out;
            res /= 2;
        }
        let flat = c_in * 4 * 4;
        let head1 = Linear::init(&mut rng, flat, 256, gain);
        let head2 = Linear::init(&mut rng, 256, 1, 1.0);
        Ok(ImageDiscriminator {
            resolution,
            from_rgb,
            stages,
            head1,
            head2,
        })
    }

    /// Forward logits `[B]` plus the leaky-ReLU masks and per-conv input
    /// sizes needed to express the input gradient as a graph.
    fn fwd_traced(
        &self,
        g: &mut Graph<F>,
        bnd: &Bound,
        x: Var,
    ) -> (Var, Vec<ArrayD<F>>, Vec<usize>) {
        let slope = F::from_f64(LRELU_SLOPE);
        let mut masks: Vec<ArrayD<F>> = Vec::new();
        let mut spatial: Vec<usize> = Vec::new();

        spatial.push(g.value(x).shape()[2]);
        let mut h = self.from_rgb.fwd(g, bnd, "d.rgb", x);
        masks.push(g.value(h).mapv(|a| if a > F::zero() { F::one() } else { slope }));
        h = g.leaky_relu(h, LRELU_SLOPE);
        for (i, s) in self.stages.iter().enumerate() {
            spatial.push(g.value(h).shape()[2]);
            h = s.keep.fwd(g, bnd, &format!("d.s{i}.keep"), h);
            masks.push(g.value(h).mapv(|a| if a > F::zero() { F::one() } else { slope }));
            h = g.leaky_relu(h, LRELU_SLOPE);
            spatial.push(g.value(h).shape()[2]);
            h = s.down.fwd(g, bnd, &format!("d.s{i}.down"), h);
            masks.push(g.value(h).mapv(|a| if a > F::zero() { F::one() } else { slope }));
            h = g.leaky_relu(h, LRELU_SLOPE);
        }
        let shape = g.value(h).shape().to_vec();
        let flatdim: usize = shape[1..].iter().product();
        let hf = g.reshape(h, &[shape[0], flatdim]);
        let mut z = self.head1.fwd(g, bnd, "d.h1", hf);
        masks.push(g.value(z).mapv(|a| if a > F::zero() { F::one() } else { slope }));
        z = g.leaky_relu(z, LRELU_SLOPE);
        let logits = self.head2.fwd(g, bnd, "d.h2", z);
        let b = g.value(logits).shape()[0];
        let logits = g.reshape(logits, &[b]);
        (logits, masks, spatial)
    }

    /// Plain logits `[B]`.
    pub fn logits_g(&self, g: &mut Graph<F>, bnd: &Bound, x: Var) -> Var {
        self.fwd_traced(g, bnd, x).0
    }

    /// Builds `Σ_b ‖∇_x D(x_b)‖²` as a first-order graph in the discriminator
    /// parameters. The leaky-ReLU derivative masks enter as constants, which
    /// is exact almost everywhere.
    pub fn input_grad_sqnorm_g(&self, g: &mut Graph<F>, bnd: &Bound, x: Var) -> Var {
        let (_, masks, spatial) = self.fwd_traced(g, bnd, x);
        let batch = g.value(x).shape()[0];

        // d(logit)/d(head2 input) = the single weight row of the head.
        let ones = g.constant(ArrayD::ones(IxDyn(&[batch, 1])));
        let w2 = bnd.var("d.h2.w"); // [1, 256]
        let mut gv = g.matmul(ones, w2, false, false); // [B, 256]
        let mut mask_idx = masks.len();

        mask_idx -= 1;
        gv = g.mul_mask(gv, masks[mask_idx].clone());
        let w1 = bnd.var("d.h1.w"); // [256, flat]
        gv = g.matmul(gv, w1, false, false); // [B, flat]

        let c_last = block_channels(4);
        let mut gsp = g.reshape(gv, &[batch, c_last, 4, 4]);
        for (i, s) in self.stages.iter().enumerate().rev() {
            let _ = s;
            mask_idx -= 1;
            gsp = g.mul_mask(gsp, masks[mask_idx].clone());
            let wdown = bnd.var(&format!("d.s{i}.down.w"));
            let sz = spatial[1 + 2 * i + 1];
            gsp = g.conv2d_transpose(gsp, wdown, 2, 1, (sz, sz));
            mask_idx -= 1;
            gsp = g.mul_mask(gsp, masks[mask_idx].clone());
            let wkeep = bnd.var(&format!("d.s{i}.keep.w"));
            let sz = spatial[1 + 2 * i];
            gsp = g.conv2d_transpose(gsp, wkeep, 1, 1, (sz, sz));
        }
        mask_idx -= 1;
        gsp = g.mul_mask(gsp, masks[mask_idx].clone());
        let wrgb = bnd.var("d.rgb.w");
        let sz = spatial[0];
        let gx = g.conv2d_transpose(gsp, wrgb, 1, 0, (sz, sz));

        let sq = g.square(gx);
        g.sum_all(sq)
    }
}

// ---------------------------------------------------------------------------
// GAN pretraining
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GanTrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub r1_gamma: f64,
    pub r1_every: u64,
    pub seed: u64,
    pub resolution: usize,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        GanTrainConfig {
            steps: 3000,
            batch: 8,
            lr: 2e-3,
            beta1: 0.0,
            beta2: 0.99,
            r1_gamma: 10.0,
            r1_every: 16,
            seed: 11,
            resolution: 64,
        }
    }
}

/// Generator plus pretraining state, so runs are resumable.
pub struct GanTrainer<F: Scalar> {
    pub generator: Generator<F>,
    pub discriminator: ImageDiscriminator<F>,
    pub opt_g: Adam<F>,
    pub opt_d: Adam<F>,
    pub step: u64,
    cfg: GanTrainConfig,
}

impl<F: Scalar> GanTrainer<F> {
    pub fn new(cfg: &GanTrainConfig) -> Result<Self> {
        Ok(GanTrainer {
            generator: Generator::new(cfg.resolution, cfg.seed)?,
            discriminator: ImageDiscriminator::new(cfg.resolution, cfg.seed)?,
            opt_g: Adam::new(cfg.lr, cfg.beta1, cfg.beta2, None),
            opt_d: Adam::new(cfg.lr, cfg.beta1, cfg.beta2, None),
            step: 0,
            cfg: cfg.clone(),
        })
    }

    fn corpus_batch(&self, corpus: &Corpus, stream: &mut Stream) -> Array4<F> {
        let r = self.cfg.resolution;
        let mut out = Array4::<F>::zeros((self.cfg.batch, 3, r, r));
        for b in 0..self.cfg.batch {
            let idx = stream.below(corpus.len());
            let img = &corpus.entries[idx].image;
            out.index_axis_mut(Axis(0), b)
                .assign(&img.mapv(|v| F::from_f32(v)));
        }
        out
    }

    /// One D update + one G update. Returns (d_loss, g_loss, r1).
    pub fn train_step(&mut self, corpus: &Corpus) -> Result<(f64, f64, f64)> {
        let step = self.step;
        let mut stream = Stream::split(self.cfg.seed, tag::STEP, step);

        // --- discriminator phase
        let real = self.corpus_batch(corpus, &mut stream);
        let z = sample_z::<F>(&mut stream, self.cfg.batch);
        let fake = {
            let mut g = Graph::new();
            let bnd = bind(&mut g, &self.generator, false);
            let zv = g.constant(z.into_dyn());
            let w = self.generator.map_g(&mut g, &bnd, zv);
            let sp = self.generator.broadcast_g(&mut g, w);
            let img = self.generator.synthesize_g(&mut g, &bnd, sp);
            g.value(img).clone()
        };

        let d_loss_val;
        let mut r1_val = 0.0;
        {
            let mut g = Graph::new();
            let bnd = bind(&mut g, &self.discriminator, true);
            let real_v = g.constant(real.clone().into_dyn());
            let fake_v = g.constant(fake);
            let rl = self.discriminator.logits_g(&mut g, &bnd, real_v);
            let fl = self.discriminator.logits_g(&mut g, &bnd, fake_v);
            let mut loss = losses::adv_d_loss_g(&mut g, rl, fl);
            if self.cfg.r1_gamma > 0.0 && step % self.cfg.r1_every == 0 {
                let real_r1 = g.constant(real.into_dyn());
                let sq = self.discriminator.input_grad_sqnorm_g(&mut g, &bnd, real_r1);
                let factor =
                    self.cfg.r1_gamma / 2.0 * self.cfg.r1_every as f64 / self.cfg.batch as f64;
                let pen = g.scale(sq, factor);
                r1_val = g.scalar(pen).as_f64();
                loss = g.add(loss, pen);
            }
            d_loss_val = g.scalar(loss).as_f64();
            if !d_loss_val.is_finite() {
                return Err(Error::training(step, "non-finite discriminator loss"));
            }
            let mut grads = g.backward(loss);
            let gm = collect_grads(&bnd, &mut grads);
            self.opt_d.step(self.discriminator.params_mut(), &gm);
        }

        // --- generator phase
        let z = sample_z::<F>(&mut stream, self.cfg.batch);
        let g_loss_val;
        {
            let mut g = Graph::new();
            let bnd_g = bind(&mut g, &self.generator, true);
            let bnd_d = bind(&mut g, &self.discriminator, false);
            let zv = g.constant(z.into_dyn());
            let w = self.generator.map_g(&mut g, &bnd_g, zv);
            let sp = self.generator.broadcast_g(&mut g, w);
            let img = self.generator.synthesize_g(&mut g, &bnd_g, sp);
            let fl = self.discriminator.logits_g(&mut g, &bnd_d, img);
            let loss = losses::adv_g_loss_g(&mut g, fl, GanGLoss::NonSaturating);
            g_loss_val = g.scalar(loss).as_f64();
            if !g_loss_val.is_finite() {
                return Err(Error::training(step, "non-finite generator loss"));
            }
            let mut grads = g.backward(loss);
            let gm = collect_grads(&bnd_g, &mut grads);
            self.opt_g.step(self.generator.params_mut(), &gm);
        }

        self.step += 1;
        Ok((d_loss_val, g_loss_val, r1_val))
    }

    /// Persists generator, discriminator, optimiser moments and step counter.
    pub fn save_state(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut c = Container::new(MAGIC_GENERATOR, self.cfg.resolution as u32);
        c.store_params(self.generator.params(), "");
        for (name, buf) in self.generator.buffers() {
            c.insert_array(name, buf);
        }
        c.store_params(self.discriminator.params(), "");
        let (t, m, v) = self.opt_g.state();
        c.insert_scalar("train.opt_g.t", t as f64);
        for (k, a) in m {
            c.insert_array(format!("train.opt_g.m.{k}"), a);
        }
        for (k, a) in v {
            c.insert_array(format!("train.opt_g.v.{k}"), a);
        }
        let (t, m, v) = self.opt_d.state();
        c.insert_scalar("train.opt_d.t", t as f64);
        for (k, a) in m {
            c.insert_array(format!("train.opt_d.m.{k}"), a);
        }
        for (k, a) in v {
            c.insert_array(format!("train.opt_d.v.{k}"), a);
        }
        c.insert_scalar("train.step", self.step as f64);
        c.write(path)
    }

    pub fn load_state(path: impl AsRef<std::path::Path>, cfg: &GanTrainConfig) -> Result<Self> {
        let c = Container::read(path, MAGIC_GENERATOR)?;
        let mut tr = GanTrainer::new(cfg)?;
        c.load_into(tr.generator.params_mut(), "")?;
        c.load_into(tr.generator.buffers_mut(), "")?;
        c.load_into(tr.discriminator.params_mut(), "")?;
        let restore = |c: &Container, which: &str, opt: &mut Adam<F>| -> Result<()> {
            let t = c.get(&format!("train.{which}.t"))?.scalar_u64();
            let mut m = std::collections::BTreeMap::new();
            let mut v = std::collections::BTreeMap::new();
            for (name, block) in &c.blocks {
                if let Some(stripped) = name.strip_prefix(&format!("train.{which}.m.")) {
                    m.insert(stripped.to_string(), block.to_array());
                } else if let Some(stripped) = name.strip_prefix(&format!("train.{which}.v.")) {
                    v.insert(stripped.to_string(), block.to_array());
                }
            }
            opt.restore(t, m, v);
            Ok(())
        };
        restore(&c, "opt_g", &mut tr.opt_g)?;
        restore(&c, "opt_d", &mut tr.opt_d)?;
        tr.step = c.get("train.step")?.scalar_u64();
        Ok(tr)
    }
}

/// Pretrains the generator. `cfg.steps == 0` leaves the initialisation
/// untouched.
pub fn pretrain_gan<F: Scalar>(corpus: &Corpus, cfg: &GanTrainConfig) -> Result<GanTrainer<F>> {
    if corpus.is_empty() {
        return Err(Error::argument("pretraining corpus is empty"));
    }
    if corpus.resolution != cfg.resolution {
        return Err(Error::config(format!(
            "corpus resolution {} != configured resolution {}",
            corpus.resolution, cfg.resolution
        )));
    }
    let mut trainer = GanTrainer::new(cfg)?;
    for _ in 0..cfg.steps {
        trainer.train_step(corpus)?;
    }
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn style_count_formula() {
        assert_eq!(num_styles(1024).unwrap(), 18);
        assert_eq!(num_styles(4).unwrap(), 2);
        assert_eq!(num_styles(64).unwrap(), 10);
        assert!(num_styles(3).is_err());
        assert!(num_styles(48).is_err());
        // strictly increasing in resolution
        let mut prev = 0;
        for p in 2..=12 {
            let s = num_styles(1 << p).unwrap();
            assert!(s > prev);
            prev = s;
        }
    }

    #[test]
    fn sample_z_is_seeded_and_shaped() {
        let mut a = Stream::split(1, tag::LATENT, 0);
        let mut b = Stream::split(1, tag::LATENT, 0);
        let za = sample_z::<f32>(&mut a, 3);
        let zb = sample_z::<f32>(&mut b, 3);
        assert_eq!(za, zb);
        assert_eq!(sample_z::<f32>(&mut a, 1).dim(), (1, 512));
    }

    #[test]
    fn broadcast_replicates_rows() {
        let w: Vec<f32> = (0..512).map(|i| i as f32 * 0.01).collect();
        let sp = broadcast(&w, 64).unwrap();
        assert_eq!(sp.num_rows(), 10);
        for r in 0..10 {
            for j in 0..512 {
                assert_eq!(sp.styles[(r, j)], w[j]);
            }
        }
        assert_eq!(broadcast(&w, 1024).unwrap().num_rows(), 18);
    }

    #[test]
    fn flatten_unflatten_identity() {
        let w: Vec<f32> = (0..512).map(|i| (i as f32).sin()).collect();
        let sp = broadcast(&w, 16).unwrap();
        let back = StylePlus::unflatten(&sp.flatten(), 16).unwrap();
        assert_eq!(sp, back);
    }

    #[test]
    fn synthesize_is_deterministic_and_in_range() {
        let gen = Generator::<f32>::new(16, 3).unwrap();
        let mut s = Stream::master(5);
        let z = sample_z::<f32>(&mut s, 2);
        let w = gen.map_z_to_w(&z);
        let sp = broadcast(&w.row(0).to_vec(), 16).unwrap();
        let a = gen.synthesize(&sp).unwrap();
        let b = gen.synthesize(&sp).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), (3, 16, 16));
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn map_is_deterministic_and_nondegenerate() {
        let gen = Generator::<f32>::new(16, 3).unwrap();
        let mut s = Stream::master(5);
        let z = sample_z::<f32>(&mut s, 4);
        let w1 = gen.map_z_to_w(&z);
        let w2 = gen.map_z_to_w(&z);
        assert_eq!(w1, w2);
        assert_eq!(w1.ncols(), 512);
        assert_ne!(w1.row(0).to_vec(), w1.row(1).to_vec());
    }

    #[test]
    fn perturbing_first_style_row_changes_image() {
        let gen = Generator::<f32>::new(16, 9).unwrap();
        let mut s = Stream::master(1);
        let z = sample_z::<f32>(&mut s, 1);
        let w = gen.map_z_to_w(&z);
        let sp = broadcast(&w.row(0).to_vec(), 16).unwrap();
        let mut sp2 = sp.clone();
        for j in 0..512 {
            sp2.styles[(0, j)] += 0.5;
        }
        let a = gen.synthesize(&sp).unwrap();
        let b = gen.synthesize(&sp2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn style_count_mismatch_is_shape_error() {
        let gen = Generator::<f32>::new(16, 9).unwrap();
        let w: Vec<f32> = vec![0.0; 512];
        let sp = broadcast(&w, 64).unwrap();
        assert!(matches!(gen.synthesize(&sp), Err(Error::Shape(_))));
    }

    #[test]
    fn extreme_styles_stay_in_range() {
        // demodulation keeps activations finite; tanh caps the output
        let gen = Generator::<f64>::new(8, 2).unwrap();
        let s = num_styles(8).unwrap();
        let styles = Array3::from_shape_fn((1, s, LATENT_DIM), |(_, i, j)| {
            if (i + j) % 2 == 0 {
                1e4
            } else {
                -1e4
            }
        });
        let img = gen.synthesize_batch(&styles).unwrap();
        assert!(img.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn checkpoint_round_trip_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("g1.xswg");
        let p2 = dir.path().join("g2.xswg");
        let gen = Generator::<f32>::new(16, 42).unwrap();
        gen.save(&p1).unwrap();
        let loaded = Generator::<f32>::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let mut s = Stream::master(7);
        let z = sample_z::<f32>(&mut s, 1);
        let w = gen.map_z_to_w(&z);
        let sp = broadcast(&w.row(0).to_vec(), 16).unwrap();
        assert_eq!(gen.synthesize(&sp).unwrap(), loaded.synthesize(&sp).unwrap());
    }

    #[test]
    fn style_gradients_match_finite_differences() {
        use crate::numcheck::{max_rel_grad_err, spread_indices};
        let gen = Generator::<f64>::new(8, 17).unwrap();
        let s = num_styles(8).unwrap();
        let mut rng = Stream::master(23);
        let styles = ArrayD::from_shape_fn(IxDyn(&[1, s, LATENT_DIM]), |_| rng.normal() * 0.7);
        let coef = ArrayD::from_shape_fn(IxDyn(&[1, 3, 8, 8]), |_| rng.normal());
        let genref = &gen;
        let mut build = move |g: &mut Graph<f64>, vs: &[Var]| {
            let bnd = bind(g, genref, false);
            let img = genref.synthesize_g(g, &bnd, vs[0]);
            let w = g.mul_mask(img, coef.clone());
            g.sum_all(w)
        };
        let probe = spread_indices(s * LATENT_DIM, 48);
        let err = max_rel_grad_err(&mut build, &[styles], 0, &probe, 1e-5);
        assert!(err < 1e-3, "style gradcheck err {err}");
    }

    #[test]
    fn image_disc_r1_graph_matches_backward_gradient() {
        // The composed input-gradient graph must equal the tape's own input
        // gradient (value check), independently of parameter derivatives.
        let d = ImageDiscriminator::<f64>::new(8, 5).unwrap();
        let mut rng = Stream::master(3);
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 3, 8, 8]), |_| rng.normal() * 0.5);

        let mut g = Graph::<f64>::new();
        let bnd = bind(&mut g, &d, false);
        let xv = g.param(x.clone());
        let logits = d.logits_g(&mut g, &bnd, xv);
        let sum = g.sum_all(logits);
        let grads = g.backward(sum);
        let gx = grads.get(xv).unwrap().clone();
        let direct: f64 = gx.iter().map(|v| v * v).sum();

        let mut g2 = Graph::<f64>::new();
        let bnd2 = bind(&mut g2, &d, true);
        let xc = g2.constant(x);
        let sq = d.input_grad_sqnorm_g(&mut g2, &bnd2, xc);
        let composed = g2.scalar(sq);
        assert!(
            (direct - composed).abs() <= 1e-9 * direct.abs().max(1.0),
            "direct {direct} vs composed {composed}"
        );
    }

    #[test]
    fn zero_step_pretraining_equals_initialization() {
        let corpus = crate::procfaces::make_corpus(2, 1, 16, 3).unwrap();
        let cfg = GanTrainConfig {
            steps: 0,
            resolution: 16,
            ..Default::default()
        };
        let tr = pretrain_gan::<f32>(&corpus, &cfg).unwrap();
        let fresh = Generator::<f32>::new(16, cfg.seed).unwrap();
        assert_eq!(tr.generator.fingerprint(), fresh.fingerprint());
    }

    #[test]
    fn pretraining_is_deterministic_across_runs() {
        let corpus = crate::procfaces::make_corpus(2, 4, 16, 3).unwrap();
        let cfg = GanTrainConfig {
            steps: 3,
            batch: 2,
            resolution: 16,
            ..Default::default()
        };
        let a = pretrain_gan::<f32>(&corpus, &cfg).unwrap();
        let b = pretrain_gan::<f32>(&corpus, &cfg).unwrap();
        assert_eq!(a.generator.fingerprint(), b.generator.fingerprint());
        assert_eq!(a.discriminator.fingerprint(), b.discriminator.fingerprint());
    }
}
