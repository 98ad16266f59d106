//! Class-incremental intent classification with rehearsal memory and
//! feature/prediction-level knowledge distillation over a TCN audio encoder.
//!
//! The crate is organized bottom-up:
//!
//! - [`scenario`]: task streams with disjoint class sets (FSC or synthetic).
//! - [`frontend`]: manifests, intent labels, log-mel features and their cache.
//! - [`model`]: the TCN encoder, the growing linear head, checkpoints.
//! - [`rehearsal`]: per-class exemplar memory and selection strategies.
//! - [`distill`]: CE / KL / MSE terms, their weights, and the total loss.
//! - [`gem`]: gradient projection against per-task memory gradients.
//! - [`trainer`]: the per-task loop and full experiment runs.
//! - [`metrics`]: accuracy matrix, smoothing, average and last accuracy.

pub mod distill;
pub mod error;
pub mod frontend;
pub mod gem;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rehearsal;
pub mod scenario;
pub mod trainer;

pub use error::{CilError, Result};
