//! A self-contained laboratory for studying dataset distillation under
//! class imbalance.
//!
//! Everything runs on synthetic Gaussian-mixture data with small
//! linear-softmax models, so a full squeeze/recover/relabel/calibrate/evaluate
//! cycle finishes in seconds and is bit-reproducible from a single seed.
//!
//! The crate is organised as a pipeline:
//!
//! * [`longtail`] — draw mixture datasets and carve exponential or
//!   perturbed-uniform class profiles out of them.
//! * [`model`] — linear (optionally one-hidden-layer) softmax classifiers
//!   with plain-SGD training on hard or soft labels.
//! * [`distill`] — gradient-based input-space distillation against a frozen
//!   teacher.
//! * [`softlabel`] — per-epoch teacher relabeling of the distilled set.
//! * [`adsa`] — post-hoc prior-compensation of soft labels, with the
//!   compensation strength chosen by minimising class-confidence spread.
//! * [`bound`] — closed-form and Monte-Carlo KL machinery for the
//!   distribution-shift decomposition that motivates the calibration step.
//! * [`harness`] — end-to-end experiment drivers: pipeline runs, the
//!   four-cell perturbation protocol, and bias decomposition tables.
//! * [`io`] — versioned little-endian artifact formats for tensors, labels,
//!   soft-label sets, and model checkpoints.
//!
//! Numeric ground rules: bulk tensors are `f32`; probabilities, losses, and
//! everything that feeds a KL divergence are `f64`. All randomness flows
//! through [`numcore::RngStream`], which never touches OS entropy.

pub mod adsa;
pub mod bound;
pub mod distill;
mod error;
pub mod harness;
pub mod io;
pub mod longtail;
pub mod model;
pub mod numcore;
pub mod softlabel;

pub use error::{Error, Result};
