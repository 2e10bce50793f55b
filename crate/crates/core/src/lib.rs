//! Kernel-superposition building blocks: functions written as linear
//! combinations of kernel evaluations between inputs and reference points,
//! the attention variants that fall out of that view, and a small ViT/MAE
//! harness to train them.

pub mod app;
pub mod attention;
pub mod autograd;
mod error;
pub mod kernels;
pub mod model;
pub mod params;
mod scalar;
pub mod superposition;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use kernels::{KernelSpec, KernelTensorPlan};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;
