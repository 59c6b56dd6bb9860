use std::f64::consts::PI;

use super::Waveform;
use crate::{Error, Result};

/// Zero crossings of the windowed sinc on each side of its centre.
const ZERO_CROSSINGS: f64 = 32.0;
/// Cutoff as a fraction of the lower of the two Nyquist frequencies.
const CUTOFF_RATIO: f64 = 0.99;

/// Band-limited resampler using a Hann-windowed sinc kernel.
///
/// The kernel is evaluated directly at each output instant, so arbitrary
/// rate pairs are supported without building polyphase tables.
#[derive(Debug, Clone)]
pub struct Resampler {
    source_rate: u32,
    target_rate: u32,
    /// Normalized cutoff: kernel is `rho * sinc(rho * d)` for a source-sample
    /// offset `d`.
    rho: f64,
    half_width: f64,
}

impl Resampler {
    pub fn new(source_rate: u32, target_rate: u32) -> Result<Self> {
        if source_rate == 0 || target_rate == 0 {
            return Err(Error::invalid("resampling rates must be positive"));
        }
        let rho = CUTOFF_RATIO * source_rate.min(target_rate) as f64 / source_rate as f64;
        Ok(Self {
            source_rate,
            target_rate,
            rho,
            half_width: ZERO_CROSSINGS / rho,
        })
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        let num = input_len as u128 * self.target_rate as u128;
        let den = self.source_rate as u128;
        ((2 * num + den) / (2 * den)) as usize
    }

    fn kernel(&self, d: f64) -> f64 {
        if d.abs() >= self.half_width {
            return 0.0;
        }
        let x = self.rho * d;
        let sinc = if x.abs() < 1e-12 {
            1.0
        } else {
            (PI * x).sin() / (PI * x)
        };
        let window = 0.5 + 0.5 * (PI * d / self.half_width).cos();
        self.rho * sinc * window
    }

    pub fn process(&self, input: &[f64]) -> Vec<f64> {
        if self.source_rate == self.target_rate {
            return input.to_vec();
        }
        let n_out = self.output_len(input.len());
        let src = self.source_rate as u64;
        let tgt = self.target_rate as u64;
        let last = input.len() as i64 - 1;
        (0..n_out as u64)
            .map(|j| {
                // Output instant in source samples, split to keep precision.
                let whole = (j * src / tgt) as i64;
                let frac = ((j * src) % tgt) as f64 / tgt as f64;
                let lo = (whole as f64 + frac - self.half_width).ceil().max(0.0) as i64;
                let hi = ((whole as f64 + frac + self.half_width).floor() as i64).min(last);
                (lo..=hi)
                    .map(|n| input[n as usize] * self.kernel((whole - n) as f64 + frac))
                    .sum()
            })
            .collect()
    }
}

/// Resamples `w` to `target_rate_hz`. Equal rates return the input unchanged.
pub fn resample(w: &Waveform, target_rate_hz: u32) -> Result<Waveform> {
    let r = Resampler::new(w.sample_rate_hz(), target_rate_hz)?;
    Waveform::new(r.process(w.samples()), target_rate_hz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn magnitude_spectrum(x: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
        buf[..x.len() / 2].iter().map(|c| c.norm()).collect()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn one_second_24k_to_16k_has_16000_samples() {
        let w = Waveform::sine(440.0, 1.0, 24_000).unwrap();
        let out = resample(&w, 16_000).unwrap();
        assert_eq!(out.len(), 16_000);
        assert_eq!(out.sample_rate_hz(), 16_000);
    }

    #[test]
    fn equal_rates_are_identity() {
        let w = Waveform::new(vec![0.1, -0.4, 0.9, 0.0], 24_000).unwrap();
        assert_eq!(resample(&w, 24_000).unwrap(), w);
    }

    #[test]
    fn zero_target_rate_is_rejected() {
        let w = Waveform::new(vec![0.0; 8], 24_000).unwrap();
        assert!(matches!(resample(&w, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn empty_input_gives_empty_output() {
        let w = Waveform::new(vec![], 24_000).unwrap();
        assert!(resample(&w, 16_000).unwrap().is_empty());
    }

    #[test]
    fn sine_440_keeps_peak_and_gain() {
        let w = Waveform::sine(440.0, 1.0, 24_000).unwrap();
        let out = resample(&w, 16_000).unwrap();
        // 16000-point DFT of a 1 s signal: bin spacing is 1 Hz.
        let spec = magnitude_spectrum(out.samples());
        let peak = spec
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert!((peak as i64 - 440).abs() <= 1, "peak at bin {peak}");
        let interior = &out.samples()[200..out.len() - 200];
        let gain_db = 20.0 * (rms(interior) * 2f64.sqrt()).log10();
        assert!(gain_db.abs() < 0.5, "gain {gain_db} dB");
    }

    #[test]
    fn nine_khz_is_rejected_when_downsampling_to_16k() {
        let w = Waveform::sine(9_000.0, 1.0, 24_000).unwrap();
        let out = resample(&w, 16_000).unwrap();
        let interior = &out.samples()[200..out.len() - 200];
        let atten_db = 20.0 * (rms(interior) * 2f64.sqrt()).log10();
        assert!(atten_db < -35.0, "only {atten_db} dB");
    }

    #[test]
    fn round_trip_of_band_limited_signal() {
        let freqs = [130.0, 470.0, 1_250.0, 2_900.0, 4_410.0, 5_950.0];
        let sr = 24_000.0;
        let x: Vec<f64> = (0..12_000)
            .map(|i| {
                freqs
                    .iter()
                    .enumerate()
                    .map(|(k, f)| (2.0 * PI * f * i as f64 / sr + k as f64).sin() / freqs.len() as f64)
                    .sum()
            })
            .collect();
        let w = Waveform::new(x.clone(), 24_000).unwrap();
        let back = resample(&resample(&w, 16_000).unwrap(), 24_000).unwrap();
        assert_eq!(back.len(), x.len());
        let (mut err, mut sig) = (0.0, 0.0);
        for i in 64..x.len() - 64 {
            err += (back.samples()[i] - x[i]).powi(2);
            sig += x[i] * x[i];
        }
        let rel_db = 10.0 * (err / sig).log10();
        assert!(rel_db < -35.0, "round trip error {rel_db} dB");
    }

    proptest! {
        #[test]
        fn resampling_is_linear(
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
            x1 in prop::collection::vec(-1.0f64..1.0, 300),
            x2 in prop::collection::vec(-1.0f64..1.0, 300),
        ) {
            let r = Resampler::new(24_000, 16_000).unwrap();
            let mixed: Vec<f64> = x1.iter().zip(&x2).map(|(p, q)| a * p + b * q).collect();
            let lhs = r.process(&mixed);
            let (y1, y2) = (r.process(&x1), r.process(&x2));
            for i in 0..lhs.len() {
                prop_assert!((lhs[i] - (a * y1[i] + b * y2[i])).abs() < 1e-6);
            }
        }

        #[test]
        fn output_length_tracks_rate_ratio(n in 0usize..5000, up in any::<bool>()) {
            let (s, t) = if up { (16_000, 24_000) } else { (24_000, 16_000) };
            let r = Resampler::new(s, t).unwrap();
            let expected = (n as f64 * t as f64 / s as f64).round() as usize;
            prop_assert_eq!(r.process(&vec![0.0; n]).len(), expected);
        }
    }
}
