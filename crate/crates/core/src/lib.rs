//! Vision Transformer training with patch sampling schedules.
//!
//! Each training iteration keeps a scheduled fraction ρ of patch tokens,
//! chosen per image by a sorting function (random or L1 magnitude), and
//! trains on the resulting dense `[B, k, L]` batch. The same sampling block
//! trades accuracy for throughput at inference time.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the element type for the common cases.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod param;
pub mod rng;
pub mod sampling;
pub mod scalar;
pub mod schedule;
pub mod tensor;
pub mod train;
pub mod vit;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{CheckpointError, Error, LoadError, Result};
pub use param::{ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ViT32 = vit::ViT<f32>;
pub type ViT64 = vit::ViT<f64>;
pub type AdamW32 = train::optim::AdamW<f32>;
