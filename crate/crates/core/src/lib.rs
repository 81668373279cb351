//! Augmentation-resistant defensive noise for image datasets.
//!
//! The pipeline trains a compact surrogate classifier (optionally with
//! non-local attention blocks), picks a per-class augmentation by gradient
//! alignment, and optimizes bounded additive noise with adaptive-step PGD so
//! that the surrogate's loss on augmented protected samples is minimized.
//! The evaluation harness trains victim classifiers on the protected data
//! and reports clean test accuracy.

pub mod augment;
pub mod config;
pub mod data;
mod error;
pub mod eval;
pub mod formats;
pub mod model;
pub mod noise;
pub mod policy;
pub mod selftest;
pub(crate) mod rng;

pub use armor_tensor::{OptimizerConfig, Sgd, Tensor};
pub use error::{ArmorError, Result};
