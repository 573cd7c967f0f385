//! Relighting autoencoder that splits an image into lighting-invariant
//! intrinsic feature maps and a compact extrinsic lighting code.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! `*32` / `*64` aliases below name the common instantiations.

pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
pub mod image;
pub mod losses;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autograd::{Grads, Graph, Var};
pub use error::{Error, Result};
pub use image::ImageBuffer;
pub use model::{ExtrinsicCode, IntrinsicFeatures, ModelConfig, Weights};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ImageBuffer32 = ImageBuffer<f32>;
pub type ImageBuffer64 = ImageBuffer<f64>;
pub type Weights32 = Weights<f32>;
pub type Weights64 = Weights<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
