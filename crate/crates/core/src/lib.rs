//! Saliency-guided dropout on a from-scratch CPU autodiff engine.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod attribution;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod scalar;
pub mod sgdrop;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Model32 = nn::Model<f32>;
pub type Model64 = nn::Model<f64>;
pub type Trainer32 = train::Trainer<f32>;
pub type Trainer64 = train::Trainer<f64>;
