//! Deformable-kernel spatial attention network (DKSAN) for video
//! super-resolution: tensors, a tape-based autodiff engine, deformable
//! convolution and deformable-kernel operators, the cascaded network, and
//! its training loop.

pub mod alignment;
pub mod autodiff;
pub mod blocks;
pub mod data;
pub mod deform_ops;
pub mod error;
pub mod layers;
pub mod loss_metrics;
pub mod network;
pub mod nn_ops;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Real, Rng, Tensor};
