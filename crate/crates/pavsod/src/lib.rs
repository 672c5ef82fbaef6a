//! Audio-visual salient object detection for panoramic (360°) video.
//!
//! Everything runs on a from-scratch tape-based autodiff core in either
//! f64 (oracle / gradient-check mode) or f32 (training mode):
//!
//! - [`geometry`] — equirectangular ↔ unit-sphere mapping and spherical
//!   positional encoding (SPE)
//! - [`acoustic`] — ambisonic B-format front-end, SELD-style encoder with
//!   semantic/location embeddings, and an intensity-vector DOA oracle
//! - [`visual`] — toy conv backbone, transformer encoder, temporal
//!   non-local block, FPN decoder
//! - [`fusion`] — pseudo-siamese student/teacher cross-modal attention
//!   blocks with label-guided distillation
//! - [`objective`] — BCE + Dice structure loss, feature-distillation MSE,
//!   MAE / adaptive F-measure metrics
//! - [`synth`] — procedural panoramic clips with a moving, sound-emitting
//!   salient object
//! - [`pipeline`] — model assembly, AdamW training loop, inference,
//!   checkpoints, config
//!
//! See `examples/` for one runnable program per capability and
//! `src/bin/pavsod.rs` for the command-line interface.

pub mod acoustic;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod image_io;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod visual;
pub mod wav;

pub use autodiff::{Graph, PoolMode, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
