//! Noised diffusion classifiers and their certification.
//!
//! The crate turns a class-conditional x₀-predicting denoiser `h(x, σ, y)` into
//! a generative classifier by using diffusion evidence lower bounds as logits:
//!
//! * **DC** classifies clean inputs from the weighted reconstruction loss.
//! * **EPNDC** classifies Gaussian-corrupted inputs `x_τ` with the exact
//!   forward posterior `q(x_t | x_{t+1}, x_τ)`.
//! * **APNDC** denoises `x_τ` once, re-noises the anchor and scores it like DC.
//!
//! Two certificates are provided: a global Lipschitz bound for DC and the
//! randomized-smoothing pipeline (exact binomial PREDICT, Clopper–Pearson
//! CERTIFY) around EPNDC/APNDC. An isotropic Gaussian-mixture testbed supplies
//! closed-form likelihoods and Bayes-optimal denoisers for verification.
//!
//! Parallel loops go through [`exec`]; with the `parallel` feature disabled they
//! run sequentially and produce bit-identical results.

pub mod acceleration;
pub mod certification;
pub mod classifiers;
pub mod denoiser;
pub mod error;
pub mod exec;
pub mod harness;
pub mod rng;
pub mod schedule;

pub use error::{NdcError, Result};
