//! Instance-adaptive amortized variational inference.
//!
//! A frozen base encoder maps an observation to a diagonal Gaussian
//! posterior. A hypernetwork conditioned on the observation and a learned
//! per-block embedding adds an instance-specific modulation to every
//! encoder parameter block. With a zero-output hypernetwork the base
//! encoder is recovered exactly, so the adaptive family contains the
//! amortized one.
//!
//! The crate ships an oracle synthetic benchmark (2-D latent, 3-D
//! observation, fixed nonlinear decoder) with posterior diagnostics that
//! measure inference accuracy against the true posterior.

pub mod autodiff;
pub mod error;
pub mod experiments;
pub mod hypernet;
pub mod models;
pub mod optim;
pub mod posterior;
pub mod stats;
pub mod synthetic;
pub mod vae;

pub use error::{Error, Result};
