//! Small differentiable compute core for sequence denoisers.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`). Production models
//! use `f32`; gradient checks run the same code in `f64`.

pub mod adamw;
pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod unet;

pub use adamw::{AdamWConfig, AdamWState};
pub use checkpoint::{Checkpoint, NamedArray};
pub use error::{NeuralError, Result};
pub use graph::{Graph, Var};
pub use params::{Gradients, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use unet::{timestep_embedding, DenoiserNet, UNetConfig};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type DenoiserNet32 = DenoiserNet<f32>;
pub type DenoiserNet64 = DenoiserNet<f64>;
pub type AdamWState32 = AdamWState<f32>;
