//! Deterministic signal-processing primitives: resampling, mel analysis and
//! F0 tracking.

mod f0;
mod mel;
mod resample;

pub use f0::{extract_f0, F0Track};
pub use mel::{
    frame_count, hann_window, hz_to_mel, mel_filterbank, mel_to_hz, melspectrogram, reflect_index,
    MelAnalyzer, MelSpectrogram, LOG_FLOOR,
};
pub use resample::{resample, Resampler};

use crate::{Error, Result};

/// Mono audio at a declared sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn silence(len: usize, sample_rate_hz: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate_hz)
    }

    /// Unit-amplitude sine starting at phase zero.
    pub fn sine(freq_hz: f64, seconds: f64, sample_rate_hz: u32) -> Result<Self> {
        let n = (seconds * sample_rate_hz as f64).round() as usize;
        let w = 2.0 * std::f64::consts::PI * freq_hz / sample_rate_hz as f64;
        Self::new((0..n).map(|i| (w * i as f64).sin()).collect(), sample_rate_hz)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_sec(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    /// Joins two waveforms sharing a sample rate.
    pub fn concat(&self, other: &Waveform) -> Result<Self> {
        if self.sample_rate_hz != other.sample_rate_hz {
            return Err(Error::invalid("cannot concatenate waveforms with different rates"));
        }
        let mut samples = self.samples.clone();
        samples.extend_from_slice(&other.samples);
        Ok(Self {
            samples,
            sample_rate_hz: self.sample_rate_hz,
        })
    }
}

/// Audio analysis parameters shared by the mel front-end, the F0 tracker and
/// the decoder's upsampling factor.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioConfig {
    pub sample_rate_hz: u32,
    pub hop: usize,
    pub n_fft: usize,
    pub win_length: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub ssl_input_rate_hz: u32,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 24_000,
            hop: 480,
            n_fft: 2048,
            win_length: 2048,
            n_mels: 80,
            fmin: 0.0,
            fmax: 12_000.0,
            ssl_input_rate_hz: 16_000,
        }
    }
}

impl AudioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate_hz == 0 || self.ssl_input_rate_hz == 0 {
            return Err(Error::invalid("sample rates must be positive"));
        }
        if self.hop == 0 || self.n_mels == 0 {
            return Err(Error::invalid("hop and n_mels must be positive"));
        }
        if !(self.hop <= self.win_length && self.win_length <= self.n_fft) {
            return Err(Error::invalid("require hop <= win_length <= n_fft"));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= self.sample_rate_hz as f64 / 2.0)
        {
            return Err(Error::invalid("require 0 <= fmin < fmax <= sample_rate/2"));
        }
        Ok(())
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.sample_rate_hz as f64 / self.hop as f64
    }
}
