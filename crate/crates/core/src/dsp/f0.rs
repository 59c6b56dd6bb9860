use rustfft::{num_complex::Complex, FftPlanner};

use super::{frame_count, AudioConfig, Waveform};

const F0_MIN_HZ: f64 = 40.0;
const F0_MAX_HZ: f64 = 1200.0;
const VOICING_THRESHOLD: f64 = 0.3;
const RMS_THRESHOLD: f64 = 1e-4;
/// A lag is accepted as the period once its correlation reaches this
/// fraction of the best peak; suppresses sub-harmonic (octave-down) picks.
const FIRST_PEAK_RATIO: f64 = 0.9;

/// Per-frame fundamental frequency. Unvoiced frames carry 0 Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct F0Track {
    pub f0_hz: Vec<f64>,
    pub voiced: Vec<bool>,
}

impl F0Track {
    /// Builds a track from raw estimates, treating non-positive values as
    /// unvoiced.
    pub fn from_hz(f0_hz: Vec<f64>) -> Self {
        let voiced = f0_hz.iter().map(|&f| f > 0.0).collect();
        let f0_hz = f0_hz.into_iter().map(|f| f.max(0.0)).collect();
        Self { f0_hz, voiced }
    }

    pub fn len(&self) -> usize {
        self.f0_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0_hz.is_empty()
    }
}

/// Normalized autocorrelation pitch tracker with parabolic peak refinement.
///
/// Frames use the same centring as the mel front-end (one frame per hop),
/// with zero padding outside the signal.
pub fn extract_f0(w: &Waveform, cfg: &AudioConfig) -> F0Track {
    let sr = w.sample_rate_hz() as f64;
    let x = w.samples();
    let n_frames = frame_count(x.len(), cfg.hop);
    let win = cfg.win_length.max(2);
    let min_lag = ((sr / F0_MAX_HZ).floor() as usize).max(2);
    let max_lag = ((sr / F0_MIN_HZ).ceil() as usize).min(win - 2);
    let mut f0 = vec![0.0; n_frames];
    if min_lag + 2 > max_lag {
        return F0Track::from_hz(f0);
    }

    let fft_len = (2 * win).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(fft_len);
    let inv = planner.plan_fft_inverse(fft_len);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_len];
    let mut frame = vec![0.0; win];
    let mut energy_prefix = vec![0.0; win + 1];
    let mut corr = vec![0.0; max_lag + 2];

    for (t, out) in f0.iter_mut().enumerate() {
        let start = (t * cfg.hop) as isize - (win / 2) as isize;
        let mut real = 0usize;
        for (k, v) in frame.iter_mut().enumerate() {
            let i = start + k as isize;
            *v = if i >= 0 && (i as usize) < x.len() {
                real += 1;
                x[i as usize]
            } else {
                0.0
            };
        }
        let real = real.max(1);
        let energy: f64 = frame.iter().map(|v| v * v).sum();
        if (energy / real as f64).sqrt() < RMS_THRESHOLD {
            continue;
        }
        for k in 0..win {
            energy_prefix[k + 1] = energy_prefix[k] + frame[k] * frame[k];
        }

        for (slot, v) in buf.iter_mut().zip(frame.iter().chain(std::iter::repeat(&0.0))) {
            *slot = Complex::new(*v, 0.0);
        }
        fwd.process(&mut buf);
        for c in buf.iter_mut() {
            *c = Complex::new(c.norm_sqr(), 0.0);
        }
        inv.process(&mut buf);

        let lag_range = min_lag - 1..=max_lag + 1;
        for lag in lag_range.clone() {
            let head = energy_prefix[win - lag];
            let tail = energy_prefix[win] - energy_prefix[lag];
            let denom = (head * tail).sqrt();
            corr[lag] = if denom > 0.0 {
                buf[lag].re / fft_len as f64 / denom
            } else {
                0.0
            };
        }

        let peaks: Vec<usize> = (min_lag..=max_lag)
            .filter(|&l| corr[l] > corr[l - 1] && corr[l] >= corr[l + 1])
            .collect();
        let Some(best) = peaks.iter().map(|&l| corr[l]).max_by(f64::total_cmp) else {
            continue;
        };
        let lag = peaks
            .into_iter()
            .find(|&l| corr[l] >= FIRST_PEAK_RATIO * best)
            .expect("best peak satisfies its own threshold");
        if corr[lag] < VOICING_THRESHOLD {
            continue;
        }
        let (a, b, c) = (corr[lag - 1], corr[lag], corr[lag + 1]);
        let curvature = a - 2.0 * b + c;
        let shift = if curvature.abs() > 1e-12 {
            (0.5 * (a - c) / curvature).clamp(-0.5, 0.5)
        } else {
            0.0
        };
        let hz = sr / (lag as f64 + shift);
        if (F0_MIN_HZ..=F0_MAX_HZ).contains(&hz) {
            *out = hz;
        }
    }
    F0Track::from_hz(f0)
}
