//! Accuracy of latent-variable estimation in finite mixture models.
//!
//! This crate measures how well the unobserved component labels of a
//! Gaussian mixture can be recovered, comparing maximum-likelihood and
//! Bayesian estimates of the label probabilities. The error of an
//! estimate is its Kullback–Leibler divergence from the true conditional
//! distribution; for regular mixtures every such error decays as `c/n`,
//! and the leading coefficient `c` has a closed form in terms of Fisher
//! information matrices.
//!
//! The crate provides:
//!
//! - [`model`]: the mixture family, data generation, and the label
//!   permutation symmetries;
//! - [`fisher`]: Fisher information matrices (quadrature and Monte Carlo
//!   backends) and the closed-form leading coefficients;
//! - [`estimators`]: the EM maximum-likelihood fit, the posterior
//!   importance sampler, and every estimated label probability and
//!   observable prediction (single targets, blocks, new observations);
//! - [`montecarlo`]: a seeded replication harness that estimates the
//!   error curves, fits leading coefficients, and compares methods;
//! - [`config`] / [`runner`]: experiment configuration and the
//!   subcommand implementations behind the `latvar` binary.

pub mod config;
pub mod error;
pub mod estimators;
pub mod fisher;
pub mod model;
pub mod montecarlo;
pub mod quadrature;
pub mod runner;
pub mod seeding;

mod numeric;

pub use error::{Error, Result};
