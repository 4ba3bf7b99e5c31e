//! Patch subspace variational autoencoder.
//!
//! A single convolutional encoder maps image patches to a Gaussian latent code
//! and a soft cluster label under a Gaussian-mixture prior. Patches are routed
//! by the argmax of that label to one of several independently parameterized
//! decoders, and the decoded patches are blended back into a full image.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, a reverse-mode tape, convolutions, Adam.
//! - [`patching`]: overlapping patch grids and distance-weighted assembly.
//! - [`synth`]: heterogeneous noise synthesis and PSNR calibration.
//! - [`model`]: encoder, mixture prior, routed decoders, checkpoints.
//! - [`losses`]: reconstruction, KL and contrastive objectives.
//! - [`trainer`]: the two-stage training protocol and inference.
//! - [`metrics`]: PSNR, SSIM, UQI and MS-SSIM.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod patching;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use losses::LossConfig;
pub use metrics::MetricReport;
pub use model::{ArchDescriptor, GmmPrior, LatentCode, ModelParams};
pub use patching::{PatchGridSpec, PatchRecord};
pub use synth::{ArtifactModel, NoiseKind, NoiseParams};
pub use tensor::{Graph, Precision, Real, Tensor, Var};
pub use trainer::{TrainConfig, TrainReport};
