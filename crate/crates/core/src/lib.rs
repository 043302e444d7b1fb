//! Desk-scale unified multimodal model: visual understanding, text-to-image
//! generation and instruction-based editing sharing one language backbone.
//!
//! All numeric code is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checking); the aliases below name the common instantiations.

pub mod adapter;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod decoder;
pub mod error;
pub mod image;
pub mod world;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod llm;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod refiner;
pub mod rope;
pub mod sampler;
pub mod tensor;
pub mod training;
pub mod vae;

pub use error::{Error, Result};
pub use graph::{AttnLayout, Graph, Var};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::{DType, Scalar, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
