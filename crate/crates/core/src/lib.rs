//! Diffusion-based 3D vessel centerline extraction.
//!
//! Pipeline: centerlines are encoded into a fixed-size coarse-to-fine matrix
//! ([`codec`]), a conditional set denoiser ([`denoiser`]) is trained to
//! predict clean matrices under scheduled Gaussian corruption
//! ([`diffusion`]), DDIM sampling draws centerline candidates from noise,
//! and vote aggregation ([`voting`]) fuses several stochastic samples into
//! one stable estimate. [`metrics`] scores coordinate accuracy and topology;
//! [`synth`] provides procedural ground truth; [`config`] and [`cli`] drive
//! reproducible experiments from plain-text configs.

pub mod cli;
pub mod codec;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod mat;
pub mod metrics;
pub mod synth;
pub mod volume;
pub mod voting;

pub use error::{Error, Result};
