//! Core of LFRA-Net, a lightweight encoder-decoder for retinal vessel
//! segmentation.
//!
//! The crate is `no_std` compatible (it needs `alloc`). Everything in here is
//! a pure computation over in-memory tensors:
//!
//! - [`tensor`]: dense tensors over `f32` / `f64`.
//! - [`autodiff`]: a tape-based reverse-mode differentiator and the kernels
//!   behind it (convolutions, pooling, batch norm, ...).
//! - [`nn`]: parameter storage, the forward-pass context and the composite
//!   blocks (multiscale convolution, down/up sampling).
//! - [`attention`]: focal modulation (bottleneck) and region-aware attention
//!   (skip connections).
//! - [`model`]: the assembled network, ablation presets and complexity
//!   accounting.
//! - [`training`]: dice loss, Adam and the training loop.
//! - [`metrics`]: confusion counts, segmentation metrics and overlays.
//! - [`data`]: samples, resizing, augmentation and train/val splitting.
//! - [`gradcheck`]: finite-difference checks of ops, blocks and the model.
//!
//! File formats, dataset loading and the CLI live in the `lfra` crate.

#![cfg_attr(not(feature = "std"), no_std)]
// NaN-rejecting checks are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod attention;
pub mod autodiff;
pub mod data;
mod error;
pub mod gradcheck;
mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Shape, Tensor};
