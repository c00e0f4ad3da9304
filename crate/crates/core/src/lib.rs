//! Out-of-support extrapolation testbed.
//!
//! Synthetic generating processes with dense or sparse influence of a changing
//! latent, a VAE estimator trained jointly on the source data and a single
//! off-support target, source-free entropy adaptation, and an oracle that
//! evaluates the identification conditions on the ground-truth generator.

pub mod adapt;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod metrics;
pub mod ndgrad;
pub mod oracle;

pub use error::{Error, Result};
pub mod rng;
pub mod synthgen;
