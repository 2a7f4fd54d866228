//! Multimodal semantic segmentation with a frozen dual-branch ViT encoder,
//! bottleneck adapters (per-modality and cross-modal), a pyramid fusion module
//! with squeeze-and-excitation gates, and a top-down multiscale decoder.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`). The crate
//! root re-exports `f32` aliases for the common types.

pub mod adapters;
pub mod autograd;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod layers;
pub mod model;
pub mod param;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use config::{AdapterMode, EncoderConfig, Modality, ModelConfig, RunConfig, TrainConfig};
pub use error::{Error, Result};
pub use param::{Component, ParamId};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f32>;
pub type Graph = autograd::Graph<f32>;
pub type ParamStore = param::ParamStore<f32>;
pub type Parameter = param::Parameter<f32>;
pub type Manet = model::Manet<f32>;

pub type Sample = data::Sample<f32>;
pub type Patch = data::Patch<f32>;
