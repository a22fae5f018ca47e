//! Adversarially trained denoising diffusion models for unsupervised
//! anomaly segmentation.
//!
//! A noise-prediction network is trained on normal images with the usual
//! ε-regression loss plus a discriminator that compares one-step denoised
//! samples with forward-process samples at the same step. Anomalies are
//! found by noising a test image part of the way, denoising it back, and
//! thresholding the reconstruction residual.

pub mod anodetect;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod phantoms;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
