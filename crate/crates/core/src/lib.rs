//! Camera and lidar fusion into semantic bird's-eye-view maps.
//!
//! Point clouds are rasterized into per-cell height statistics and treated
//! as extra "pseudo-camera" views. Every view is encoded into feature maps
//! whose pixels are tagged with their viewing-ray direction; learnable
//! map queries gather evidence from all views by cross-attention, past
//! instants are ego-motion aligned and fused with a 3-D convolution, and a
//! small decoder upsamples the result to per-class logits.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for training, `f64`
//! for gradient certification); the aliases below name the common choices.

pub mod config;
pub mod data;
pub mod diff;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod head;
pub mod model;
pub mod nn;
pub mod raster;
pub mod scalar;
pub mod temporal;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub type Tensor32 = diff::Tensor<f32>;
pub type Tensor64 = diff::Tensor<f64>;
pub type FusionModel32 = model::FusionModel<f32>;
pub type FusionModel64 = model::FusionModel<f64>;
