//! Contrastive-regularized training robust to noisy labels, at desk scale.
//!
//! The crate bundles four things that are usually spread across a research
//! codebase:
//!
//! - a small reverse-mode differentiation engine over dense `f64` tensors
//!   with a stop-gradient node and a finite-difference oracle,
//! - the siamese model stack (encoder with projection head, prediction head,
//!   linear softmax classifier) and the contrastive regularizers with their
//!   confidence-weighted batch objective,
//! - dataset generation, label-noise injection, augmentation, label
//!   correction, and the training/linear-probe/memorization harness,
//! - exact brute-force verification of the information-theoretic claims
//!   behind the method on small finite distributions.
//!
//! Start with the runnable programs in `examples/`; the `ctrr` binary wraps
//! the same functionality behind subcommands for scripted runs.

pub mod artifact;
pub mod audit;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod info;
pub mod losses;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
