//! Allocation-only core of a desk-scale lab for preference alignment of
//! diffusion models.
//!
//! The crate covers the whole numerical pipeline:
//!
//! - [`diffusion`]: linear noise schedules, closed-form forward noising, the
//!   simplified denoising objective and ancestral sampling.
//! - [`model`]: a conditioned MLP noise predictor with exact reverse-mode
//!   gradients and an SGD optimizer.
//! - [`dpo`]: the Diffusion-DPO margin logit and loss, the per-sample
//!   gradient decomposition and the gradient-variance diagnostics.
//! - [`rewards`]: a synthetic analytic reward committee and the unanimous
//!   consensus partitioner.
//! - [`datagen`]: a synthetic preference generator with controllable
//!   dimensional conflict.
//! - [`semitrain`]: timestep-conditional pseudo-labeling, dynamic thresholds,
//!   the composite objective and the iterative self-training driver.
//! - [`evalrep`]: committee-based evaluation and paired model comparison.
//!
//! Everything is `no_std` + `alloc`. File formats, checkpoints and the CLI
//! live in the companion `semidpo` crate.
#![cfg_attr(not(test), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod datagen;
pub mod diffusion;
pub mod dpo;
mod error;
pub mod evalrep;
pub mod exec;
pub mod math;
pub mod model;
pub mod rewards;
pub mod semitrain;

pub use error::{Error, Result};
