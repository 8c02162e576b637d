//! Deep Gaussian processes with a denoising-diffusion variational posterior.
//!
//! The posterior over the inducing variables of a deep GP is represented by
//! the terminal state of a learned reverse-time diffusion. Training maximizes
//! a stochastic lower bound on the marginal likelihood whose terms (prior,
//! likelihood, path divergence, reference correction) are all built on the
//! in-crate autodiff tape. A mean-field Gaussian baseline and closed-form
//! conjugate oracles share the same data pipeline for comparison.

pub mod diffusion;
pub mod elbo;
pub mod error;
pub mod gp;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod tape;

pub use error::{Error, Result};
