//! Face swapping through an extended-latent mapper on a frozen style-based
//! generator.
//!
//! The crate is organised around the pipeline stages:
//!
//! * [`procfaces`] — procedural face renderer with known identity/attribute
//!   factors, the training corpus and ground-truth oracle.
//! * [`generator`] — toy style-based generator (mapping network + modulated
//!   convolutions), pretrained once and then frozen.
//! * [`encoders`] — overlapping-patch transformer identity encoder (frozen
//!   after pretraining) and trainable convolutional attribute encoder, plus
//!   the landmark provider used by the attribute loss.
//! * [`mapper`] — the latent mapper MLP (2304 → S×512 extended styles) and
//!   the W+ discriminator that regularises it.
//! * [`losses`] — adversarial losses, R1 penalty, identity cosine loss,
//!   landmark loss, MS-SSIM + L1 mix loss, gated reconstruction, totals.
//! * [`pipeline`] — dataset construction (sampling, W+ projection,
//!   persistence), splitting, pair sampling.
//! * [`training`] — the alternating swap-training loop and the end-to-end
//!   swap operation.
//! * [`evalkit`] — identity similarity, pose/expression probes, FID.
//!
//! Everything is deterministic under a seed: models are built on a small
//! reverse-mode autodiff engine ([`autodiff`]) over `ndarray`, generic over
//! `f32` (training) and `f64` (numerical verification).

pub mod adam;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod generator;
pub mod imageio;
pub mod losses;
pub mod mapper;
pub mod nn;
pub mod numcheck;
pub mod pipeline;
pub mod probe;
pub mod procfaces;
pub mod rng;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Images are channel-first `[3, H, W]` arrays with intensities in `[-1, 1]`.
pub type Image = ndarray::Array3<f32>;
/// 68 facial keypoints as `[68, 2]` (x, y) pixel coordinates.
pub type LandmarkSet = ndarray::Array2<f32>;
