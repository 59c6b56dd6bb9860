use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::{num_complex::Complex, Fft, FftPlanner};

use super::{AudioConfig, Waveform};
use crate::{Error, Result};

/// Power floor applied before the natural log.
pub const LOG_FLOOR: f64 = 1e-5;

/// Log-compressed mel energies, `frames x n_mels`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Array2<f64>,
    pub frame_rate_hz: f64,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.values.ncols()
    }

    /// Keeps the first `frames` rows.
    pub fn truncated(&self, frames: usize) -> Self {
        let frames = frames.min(self.n_frames());
        Self {
            values: self.values.slice(ndarray::s![..frames, ..]).to_owned(),
            frame_rate_hz: self.frame_rate_hz,
        }
    }
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Centred framing: frame `t` is centred on sample `t * hop`.
pub fn frame_count(n_samples: usize, hop: usize) -> usize {
    n_samples.div_ceil(hop)
}

/// Maps a possibly out-of-range index onto `0..n` by mirror reflection
/// without repeating the edge sample. Signals shorter than the padding are
/// reflected repeatedly.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos())
        .collect()
}

/// Triangular mel filters on the HTK scale, without area normalization.
/// Returns `n_mels x (n_fft/2 + 1)` weights and the centre frequency of each
/// filter.
pub fn mel_filterbank(
    sample_rate_hz: u32,
    n_fft: usize,
    n_mels: usize,
    fmin: f64,
    fmax: f64,
) -> (Array2<f64>, Vec<f64>) {
    let n_bins = n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * sample_rate_hz as f64 / n_fft as f64;
            let rise = (f - left) / (centre - left);
            let fall = (right - f) / (right - centre);
            fb[[m, k]] = rise.min(fall).max(0.0);
        }
    }
    (fb, edges[1..=n_mels].to_vec())
}

/// Reusable STFT + mel projection for one [`AudioConfig`].
#[derive(Clone)]
pub struct MelAnalyzer {
    cfg: AudioConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filterbank: Array2<f64>,
}

impl std::fmt::Debug for MelAnalyzer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelAnalyzer").field("cfg", &self.cfg).finish()
    }
}

impl MelAnalyzer {
    pub fn new(cfg: &AudioConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        // Window of win_length centred inside n_fft.
        let mut window = vec![0.0; cfg.n_fft];
        let offset = (cfg.n_fft - cfg.win_length) / 2;
        window[offset..offset + cfg.win_length].copy_from_slice(&hann_window(cfg.win_length));
        let (filterbank, _) =
            mel_filterbank(cfg.sample_rate_hz, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax);
        Ok(Self {
            cfg: cfg.clone(),
            fft,
            window,
            filterbank,
        })
    }

    pub fn config(&self) -> &AudioConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &Array2<f64> {
        &self.filterbank
    }

    /// Window applied to each `n_fft` frame.
    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// `frames x (n_fft/2 + 1)` power spectrogram with reflect-padded
    /// centred framing.
    pub fn power_spectrogram(&self, samples: &[f64]) -> Array2<f64> {
        let n_fft = self.cfg.n_fft;
        let n_bins = n_fft / 2 + 1;
        let frames = frame_count(samples.len(), self.cfg.hop);
        let mut out = Array2::zeros((frames, n_bins));
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let half = (n_fft / 2) as isize;
        for t in 0..frames {
            let start = (t * self.cfg.hop) as isize - half;
            for (k, slot) in buf.iter_mut().enumerate() {
                let idx = reflect_index(start + k as isize, samples.len());
                *slot = Complex::new(samples[idx] * self.window[k], 0.0);
            }
            self.fft.process(&mut buf);
            for (k, c) in buf[..n_bins].iter().enumerate() {
                out[[t, k]] = c.norm_sqr();
            }
        }
        out
    }

    pub fn analyze(&self, w: &Waveform) -> Result<MelSpectrogram> {
        if w.sample_rate_hz() != self.cfg.sample_rate_hz {
            return Err(Error::invalid(format!(
                "waveform rate {} Hz does not match analysis rate {} Hz",
                w.sample_rate_hz(),
                self.cfg.sample_rate_hz
            )));
        }
        let frames = frame_count(w.len(), self.cfg.hop);
        if frames == 0 {
            return Ok(MelSpectrogram {
                values: Array2::zeros((0, self.cfg.n_mels)),
                frame_rate_hz: self.cfg.frame_rate_hz(),
            });
        }
        let power = self.power_spectrogram(w.samples());
        let mel = power.dot(&self.filterbank.t());
        Ok(MelSpectrogram {
            values: mel.mapv(|p| p.max(LOG_FLOOR).ln()),
            frame_rate_hz: self.cfg.frame_rate_hz(),
        })
    }
}

/// Log-mel spectrogram of `w` under `cfg`.
pub fn melspectrogram(w: &Waveform, cfg: &AudioConfig) -> Result<MelSpectrogram> {
    MelAnalyzer::new(cfg)?.analyze(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_second_gives_50_by_80() {
        let w = Waveform::sine(220.0, 1.0, 24_000).unwrap();
        let m = melspectrogram(&w, &AudioConfig::default()).unwrap();
        assert_eq!(m.values.dim(), (50, 80));
        assert_eq!(m.frame_rate_hz, 50.0);
    }

    #[test]
    fn silence_hits_the_floor() {
        let w = Waveform::silence(24_000, 24_000).unwrap();
        let m = melspectrogram(&w, &AudioConfig::default()).unwrap();
        assert!(m.values.iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn frame_counts_follow_ceil() {
        let cfg = AudioConfig::default();
        for n in [1usize, 479, 480, 481, 24_000] {
            let w = Waveform::new((0..n).map(|i| (i as f64 * 0.01).sin()).collect(), 24_000)
                .unwrap();
            let m = melspectrogram(&w, &cfg).unwrap();
            assert_eq!(m.n_frames(), n.div_ceil(480), "n = {n}");
            assert!(m.values.iter().all(|v| v.is_finite() && *v >= LOG_FLOOR.ln()));
        }
    }

    #[test]
    fn rate_mismatch_is_rejected() {
        let w = Waveform::silence(1600, 16_000).unwrap();
        assert!(matches!(
            melspectrogram(&w, &AudioConfig::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn one_khz_sine_peaks_in_nearest_filter() {
        // Centre frequencies recomputed independently of mel_filterbank.
        let lo = 0.0f64;
        let hi = 2595.0 * (1.0f64 + 12_000.0 / 700.0).log10();
        let nearest = (1..=80)
            .map(|i| {
                let mel = lo + (hi - lo) * i as f64 / 81.0;
                700.0 * (10f64.powf(mel / 2595.0) - 1.0)
            })
            .enumerate()
            .min_by(|a, b| (a.1 - 1000.0).abs().total_cmp(&(b.1 - 1000.0).abs()))
            .unwrap()
            .0;
        let w = Waveform::sine(1000.0, 1.0, 24_000).unwrap();
        let m = melspectrogram(&w, &AudioConfig::default()).unwrap();
        for row in m.values.rows() {
            let arg = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(arg, nearest);
        }
    }

    #[test]
    fn reflect_index_mirrors_without_edge_repeat() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-100, 1), 0);
    }

    #[test]
    fn filterbank_peaks_at_centres() {
        let (fb, centres) = mel_filterbank(24_000, 2048, 80, 0.0, 12_000.0);
        assert_eq!(fb.dim(), (80, 1025));
        assert!(centres.windows(2).all(|c| c[0] < c[1]));
        assert!(fb.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
