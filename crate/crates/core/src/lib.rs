//! Cloud-edge collaborative adaptation of a miniature query-based detector.
//!
//! The crate bundles everything needed to run the full loop on synthetic
//! scenes: a tape-based autodiff engine ([`autodiff`]), the detector itself
//! ([`detector`]), visual prompt generation ([`vpg`]), adversarial feature
//! alignment and pseudo-label filtering ([`alignment`]), synthetic benchmark
//! construction ([`synthdata`]), and the orchestration layer ([`pipeline`]).

pub mod alignment;
pub mod autodiff;
pub mod detector;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod synthdata;
pub mod vpg;

pub use autodiff::{AdamW, AdamWConfig, ParamSet, Tape, Tensor, Var};
pub use error::{Error, Result};
