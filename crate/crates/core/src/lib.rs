//! Aligns a trainable surrogate classifier against a frozen witness
//! classifier (global + local + adversarial-aware terms), crafts
//! transferable adversarial examples with a composable sign-gradient
//! attack suite, and measures cross-architecture transferability and
//! feature similarity.

pub mod adapters;
pub mod alignment;
pub mod archive;
pub mod attack;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod init;
pub mod selfadv;
pub mod trainer;

pub use error::{Error, FailureClass, Result};

/// Pixel-space L-infinity budget used throughout the toolkit by default
/// (16 on the 0-255 scale).
pub const DEFAULT_EPSILON: f64 = 16.0 / 255.0;
