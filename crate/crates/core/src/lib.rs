//! Cross-scale masked autoencoder pretraining, built on a small
//! reverse-mode autodiff engine.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`] – dense tensors, the autodiff tape, counter-based RNG
//!   streams and a finite-difference gradient checker.
//! * [`vit`] – patchification, masking, positional encodings and the
//!   encoder/decoder transformer stacks.
//! * [`augment`] – multi-scale view generation and a procedural labelled
//!   texture dataset.
//! * [`losses`] – cross-scale consistency, cross-scale prediction,
//!   reconstruction and their weighted total.
//! * [`train`] – configuration, AdamW, warmup/cosine schedule, checkpoints
//!   and the two-branch training step.
//! * [`eval`] – frozen-encoder features, KNN probing, scale sweeps and the
//!   ablation runner.
//! * [`io`] – key=value config files, the binary tensor format and the tile
//!   dataset layout.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod error;
pub mod eval;
pub mod io;
pub mod losses;
pub mod numerics;
pub mod par;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
