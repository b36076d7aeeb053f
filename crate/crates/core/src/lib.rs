//! Desk-scale laboratory for debate-driven on-policy distillation.
//!
//! The crate is organized bottom-up:
//!
//! - [`simplex`]: categorical distributions, logits, softmax, sampling.
//! - [`divergence`]: forward KL, reverse KL and skew JSD with closed-form
//!   logit gradients, a finite-difference oracle, and bound probes.
//! - [`weighting`]: confidence scores to teacher weights, and the weighted
//!   multi-teacher token loss.
//! - [`debate`]: the multi-round teacher debate engine, transcripts, and
//!   deterministic mock teachers.
//! - [`opad`]: the tool-use environment, student policy, and the trajectory
//!   training loop.
//! - [`modegeom`]: mode-seeking versus mode-covering fits on binned mixtures.
//! - [`harness`]: run configuration, metrics emission and named experiments.

pub mod debate;
pub mod divergence;
pub mod error;
pub mod harness;
pub mod modegeom;
pub mod opad;
pub mod simplex;
pub mod weighting;

pub use error::{Error, Result};
