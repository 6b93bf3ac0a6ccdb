//! Contrastive copula VAE laboratory.
//!
//! A small, dependency-light stack for training total-correlation-penalized
//! VAEs whose penalty classifier contrasts factorized posterior samples with
//! copula-coupled samples, plus the baselines, a procedural ground-truth
//! factor dataset and a disentanglement metric suite.

pub mod copula;
pub mod data;
mod error;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod special;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
