//! Reconstruction-based anomaly detection for blow-fill-seal vial strips.
//!
//! A GAN-wrapped residual autoencoder with a dense bottleneck is trained on
//! nominal patches only (with Perlin-noise perturbation), and anomalies are
//! flagged from the SSIM between a patch and its reconstruction. Scores are
//! thresholded per vial region and aggregated patch → strip → 10-run series.
//!
//! All numeric code is generic over [`Scalar`] (`f32`/`f64`); the aliases at
//! the crate root pick `f32` for the production pipeline and `f64` where a
//! double-precision twin is useful (gradient checks, reference comparisons).

pub mod aggregation;
pub mod autograd;
pub mod checkpoint;
pub mod error;
pub mod imagecore;
pub mod metrics;
pub mod network;
pub mod perlin;
pub mod scalar;
pub mod scoring;
pub mod synthkit;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Image = imagecore::Image<f32>;
pub type Image64 = imagecore::Image<f64>;
pub type FrameStack = imagecore::FrameStack<f32>;
pub type Tensor = tensor::Tensor<f32>;
pub type Generator = network::Generator<f32>;
pub type Discriminator = network::Discriminator<f32>;
pub type Trainer = training::Trainer<f32>;
