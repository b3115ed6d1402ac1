//! Metadata-enhanced transformer for image sentiment classification over
//! precomputed image, caption and prompt feature vectors.
//!
//! All math is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{Ablation, AblationFlag, FeatureBatch, FeatureTriple, ModelConfig, SentiFormer};
pub use scalar::{DType, Precision, Scalar};
pub use tensor::{ParamStore, Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type SentiFormer32 = SentiFormer<f32>;
pub type SentiFormer64 = SentiFormer<f64>;
