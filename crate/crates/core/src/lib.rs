//! Conditional pixel-space video diffusion for binary gait silhouettes.
//!
//! The crate trains a 3D U-Net noise predictor on silhouette clips, samples
//! new clips conditioned on identity, view and covariate, mixes identity
//! tokens to produce novel identities, and scores identity preservation with
//! a cosine-similarity metric over gait embeddings.

pub mod cli;
pub mod conditioning;
pub mod convert;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod plot;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
