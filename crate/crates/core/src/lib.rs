//! FastPitchFormant: a small source-filter text-to-spectrogram model with a
//! hand-written reverse-mode autodiff engine.
//!
//! The crate is organised bottom-up: [`tensor`] and [`tape`] provide the
//! numeric substrate, [`model`] builds the network on top of it, and
//! [`training`], [`control`], [`metrics`] and [`data`] cover learning,
//! pitch-shift synthesis, evaluation and the synthetic corpus.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod container;
pub mod control;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod selfcheck;
pub mod spectrogram;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{FastPitchFormant, ModelConfig};
pub use spectrogram::MelSpectrogram;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
