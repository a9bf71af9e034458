//! Spatial time-series imputation with a conditional diffusion model.
//!
//! The denoiser mixes decaying-wave temporal kernels through a learnably
//! rescaled graph spectrum and applies them with FFT convolution. Training
//! scales the noise target by `(1 + r)` with a learnable scalar `r` that is
//! averaged over training and reused by the reverse sampler.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod astg;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod fftconv;
pub mod graph;
pub mod impute;
pub mod io;
pub mod linalg;
pub mod par;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
