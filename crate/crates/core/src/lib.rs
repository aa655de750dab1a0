//! Core algorithms for contrastive self-supervised pre-training of a U-Net
//! encoder and its downstream use for binary retinal segmentation.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. Everything that touches the filesystem lives in the companion
//! `fundus-ssl` crate; here every operation is a pure function of its inputs
//! and an explicit [`rng::RngStream`].
//!
//! Module map:
//!
//! - [`tensor`], [`graph`], [`params`], [`gradcheck`]: dense f32 tensors and
//!   a tape-based reverse-mode autodiff with the layer primitives a U-Net needs.
//! - [`unet`]: residual U-Net with optional convolutional skips.
//! - [`augment`]: pre-training views and fine-tuning augmentation.
//! - [`moco`]: projection head, key queue, momentum update, InfoNCE, pre-training loop.
//! - [`train`]: Adam, cosine restarts, segmentation loss, fine-tuning loop.
//! - [`eval`]: flip TTA, threshold selection, pooled Dice, PR/AUPRC, paired t-intervals.
//! - [`probe`]: feature/target Pearson correlation and activation maps.
//! - [`data`]: samples, resizing, splits, synthetic fundus generator, NTC1 checkpoints.

#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_op_in_unsafe_fn)]
// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod augment;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
mod linalg;
pub mod moco;
pub mod params;
pub mod probe;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
pub use graph::{Graph, Mode, Var};
pub use params::{ModelParams, ParamKind};
pub use rng::RngStream;
pub use tensor::Tensor;
