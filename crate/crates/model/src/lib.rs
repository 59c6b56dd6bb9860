//! Neural side of the singing voice synthesizer: prior and posterior
//! encoders, the sine-excited upsampling decoder, spectrogram/period/scale
//! discriminators, losses, training loop, checkpoints and corpus evaluation.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod gan;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor_dsp;
pub mod train;

pub use error::{Error, Result};
