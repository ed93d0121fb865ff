//! Conditional diffusion segmentation.
//!
//! Segmentation masks are generated by a denoising diffusion process whose
//! clean-mask predictor is a UNet conditioned on multi-scale features from a
//! pyramid vision transformer adapter. The crate covers the closed-form
//! diffusion math, both networks, training, sampling with consensus fusion,
//! metrics, a synthetic dataset, profiling, and the on-disk formats.

pub mod adapter;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod profiling;
pub mod sampling;
pub mod schedule;
pub mod training;

pub use error::{Error, Result};
