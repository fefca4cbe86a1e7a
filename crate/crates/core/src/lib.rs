//! Episodic few-shot classification laboratory built around Born-Again
//! Network distillation and its few-shot multi-task extension (mutual
//! regularization, mismatched teachers, meta-controlled temperature).
//!
//! The crate is `no_std` with `alloc`: everything here is pure computation
//! over in-memory values. File formats, the command line and wall-clock
//! timing live in the `fsban` companion crate.
//!
//! Layout:
//! - [`tensor`], [`tape`], [`optim`]: dense f64 tensors, reverse-mode
//!   autodiff and Adam.
//! - [`data`]: the procedural multi-domain universe and episode sampler.
//! - [`model`]: MLP encoder with Prototypical / Matching / Relation heads.
//! - [`losses`]: temperature softmax, CE, JS and the distillation objectives.
//! - [`train`]: gen-0, BAN and FS-BAN training regimes.
//! - [`analysis`]: accuracy with CI, TSD, R_FC, R_HV, LDA, noise sweeps.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod analysis;
pub mod data;
mod error;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
