//! Flow-matching speech enhancement in the compressed complex-STFT domain.
//!
//! The crate implements a conditional optimal-transport probability path
//! between noisy and clean spectrograms, three interchangeable training
//! objectives (velocity prediction, clean-signal prediction, and its
//! EDM-preconditioned variant), optional SI-SDR and perceptual auxiliary
//! losses, an ODE sampler for few-step inference, and the training and
//! evaluation harness around them.

pub mod autodiff;
pub mod aux;
pub mod audio;
pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod objectives;
pub mod path;
pub mod resample;
pub mod sampler;
pub mod spectral;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
