//! End-to-end stereo disparity estimation on a from-scratch tensor kernel.
//!
//! The pipeline follows the MSDC-Net architecture: siamese multi-scale dense
//! 2D feature extraction and fusion, a concatenation cost volume over
//! quarter-resolution disparity levels, a multi-scale residual 3D matching
//! module with learned scale recovery, and a fully differentiable
//! soft-argmin readout trained with a masked smooth-L1 loss.
//!
//! Everything runs on the CPU over [`tensor`], a small reverse-mode
//! differentiation kernel whose backward rules are verified against central
//! finite differences (see [`verify`]). Training at desk scale uses the
//! synthetic random-dot generator in [`data`], which provides exact integer
//! ground truth.
//!
//! The `examples/` directory demonstrates each capability; the `msdc` binary
//! exposes the same operations as subcommands (synth, train, predict, eval,
//! gradcheck, info).

pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod runtime;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
