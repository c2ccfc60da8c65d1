//! Core library for a U-shaped segmentation network with multidirectional
//! shrinkage attention, built on a small self-contained f64 tensor engine
//! with reverse-mode automatic differentiation.
//!
//! The crate is organized around the data flow of the architecture:
//!
//! - [`tensor`] / [`tape`] — dense tensors, forward ops, autodiff, gradient
//!   checking.
//! - [`attention`] — parameter-free self-attention applied along the
//!   horizontal, vertical and depth axes of a feature map.
//! - [`shrinkage`] — hard threshold gating of averaged attention evidence,
//!   fused with the prior convolutional feature.
//! - [`network`] — encoder/decoder blocks, the full model forward pass,
//!   ablation switches and binary checkpoints.
//! - [`metrics`] — confusion counts, DSC/IoU/SEN/SPEC/ACC and CSV reports.
//! - [`data`] — synthetic speckled ellipse datasets and binary PGM I/O.
//! - [`train`] — Adam, the deterministic training loop, evaluation, the
//!   threshold sweep and the ablation harness.

pub mod attention;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod network;
pub mod shrinkage;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{grad_check, BnMode, BnStats, NodeId, Tape};
pub use tensor::{
    add, conv2d, conv2d_padded, inverse_permutation, matmul, maxpool2d, mul, permute, scale,
    softmax_rows, upsample_nearest, Padding, Tensor,
};
