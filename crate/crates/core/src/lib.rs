//! Student-teacher self-distillation for blood-smear imagery, with the
//! downstream evaluation harness (linear probe, k-NN, cross-source and k-fold
//! protocols, PCA feature maps).
//!
//! Modules, bottom-up:
//!
//! * [`tensor`]: dense tensors and a reverse-mode gradient tape.
//! * [`vit`]: a small Vision Transformer encoder and its checkpoint format.
//! * [`ssl`]: projection head, teacher centering (EMA or Sinkhorn-Knopp),
//!   distillation loss and the optional KoLeo term.
//! * [`train`]: optimizer, schedules, EMA teacher and the training loop.
//! * [`data`]: image I/O, patch tiling, cell crops, multi-crop augmentation
//!   and a synthetic smear generator.
//! * [`eval`]: embeddings, metrics, classifiers, protocols and PCA maps.
//! * [`config`] and [`app`]: the run configuration and the command
//!   implementations behind the `dino-rbc` binary.

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod app;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod params;
pub mod rng;
pub mod ssl;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
