//! Gradient-leakage laboratory: a small autodiff engine, models with optional
//! variational bottlenecks, gradient inversion attacks, gradient defenses,
//! reconstruction metrics and an experiment harness.

pub mod attacks;
pub mod autodiff;
pub mod defenses;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod seeds;

pub use error::{Error, Result};
