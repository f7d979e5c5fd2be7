//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Every operation returns a new [`Tensor`] that remembers its parents
//! while gradient recording is enabled. [`Tensor::backward`] walks the
//! recorded graph once in reverse creation order.

mod conv;
pub mod gradcheck;
mod ops;
pub mod optim;
mod resample;
mod tensor;

pub use optim::{adamw_step, AdamState, AdamW, AdamWParams, LrSchedule, WarmupConstant};
pub use resample::ResamplePlan;
pub use tensor::{grad_enabled, no_grad, Backward, Gradients, NoGradGuard, Tensor};
