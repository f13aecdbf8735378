//! Transformer encoders for vibration-signal fault classification.
//!
//! The crate covers the whole pipeline: windowing raw recordings, random
//! augmentation, tokenisation (constant, CNN and Fourier), a post-norm
//! transformer encoder with rotary position embeddings, masked
//! reconstruction pretraining, supervised fine-tuning and an experiment
//! harness. Everything runs on a small `f64` autodiff engine in
//! [`autodiff`].

pub mod autodiff;
pub mod error;
pub mod experiment;
pub mod augment;
pub mod rng;
pub mod model;
pub mod signal;
pub mod tokenize;
pub mod train;

pub use error::{Error, Result};
