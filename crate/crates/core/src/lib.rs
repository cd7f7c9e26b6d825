//! Variational continual learning with mean-field Gaussian networks.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense row-major tensors, seeded Gaussian sampling, Adam and a
//!   central-difference gradient oracle.
//! - [`vbnn`]: the variational multi-head MLP, its β-ELBO objective and exact
//!   reverse-mode gradients.
//! - [`heuristics`]: task difficulty / similarity probes and the per-task β
//!   schedule.
//! - [`continual`]: the sequential training loop and accuracy bookkeeping.
//! - [`data`]: MNIST / CIFAR-10 loaders and task-sequence builders.

pub mod continual;
pub mod data;
pub mod error;
pub mod heuristics;
pub mod numerics;
pub mod vbnn;

pub use error::{Error, Result};
