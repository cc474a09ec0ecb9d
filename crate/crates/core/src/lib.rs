//! Sample-wise contrastive knowledge distillation.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tape`]), the
//! distillation losses built on it ([`losses`]), closed-form analysis of the
//! contrastive gradient ([`analysis`]), rectifier MLPs ([`model`]), data
//! handling ([`data`], [`cifar`]) and the training loop ([`train`]).
//!
//! Tensor math, losses and analysis are generic over [`Scalar`] (`f32` or
//! `f64`); the aliases below fix the scalar to `f64`, which is what the
//! training harness and file formats use.

// `!(x > 0.0)` style checks are kept on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod checkpoint;
pub mod cifar;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use losses::{DistillConfig, KdKind, NegativeScope, SimilarityKind, TripleStrategy};
pub use scalar::{compensated_sum, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape64 = tape::Tape<f64>;
pub type Tape32 = tape::Tape<f32>;
pub type MlpParams64 = model::MlpParams<f64>;
pub type MlpParams32 = model::MlpParams<f32>;
pub type GradientFactorInput64 = analysis::GradientFactorInput<f64>;
