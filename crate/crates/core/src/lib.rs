//! Tiered factored feature-plane radiance fields for dynamic scenes: plane
//! grids, volume-rendered feature maps, a convolutional decoder, training and
//! PSNR/DPSNR evaluation, on a small built-in autodiff engine.

// `!(a < b)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod field;
pub mod model;
pub mod planes;
pub mod raster;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
