//! Signal processing, score handling, SSL feature fusion and objective
//! metrics for a VAE/GAN singing voice synthesizer.
//!
//! Everything in this crate is a pure function of its inputs. The neural
//! parts (encoders, decoder, discriminators, training) live in `svs-model`.

pub mod data;
pub mod dsp;
pub mod error;
pub mod metrics;
pub mod score;
pub mod sslfront;
pub mod wav;

pub use error::{Error, Result};
