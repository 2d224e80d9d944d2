//! Adversarial-robustness laboratory: trains plain and defended feed-forward
//! networks (adversarial training, defensive distillation, and an LLE-DNN
//! whose non-parametric input transform exposes no input gradients), crafts
//! l∞/l₂/l₀ attacks through surrogate models, and reproduces the resistance
//! tables and dimensionality sweep of the underlying experiment protocol at
//! desk scale.

pub mod attacks;
pub mod dataset;
pub mod defenses;
pub mod error;
pub mod harness;
pub mod lle;
pub mod mlp;
pub mod numerics;
pub mod rng;

pub use error::{Error, Result};
