//! Progressive, alias-free, class-conditional GAN training on a small
//! hand-written autodiff core.
//!
//! The generator grows by appending filtered synthesis layers while the
//! previous ones stay frozen. Discrimination runs on multi-scale features of
//! fixed extractors after random channel and scale mixing. Training adds
//! classifier guidance and a lazy path-length penalty. Metrics, latent
//! inversion with pivotal tuning and principal edit directions complete the
//! toolchain. Everything is generic over `f32`/`f64` through [`Scalar`].

pub mod autodiff;
pub mod classifier;
pub mod config;
pub mod conditioning;
pub mod container;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod inversion;
pub mod layerspec;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod projector;
pub mod resample;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Single-precision instantiations.
pub type TensorF32 = Tensor<f32>;
pub type GeneratorF32 = generator::Generator<f32>;
pub type TrainerF32 = trainer::Trainer<f32>;
pub type CheckpointF32 = trainer::Checkpoint<f32>;

/// Double-precision instantiations.
pub type TensorF64 = Tensor<f64>;
pub type GeneratorF64 = generator::Generator<f64>;
pub type TrainerF64 = trainer::Trainer<f64>;
pub type CheckpointF64 = trainer::Checkpoint<f64>;
