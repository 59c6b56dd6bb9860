//! Browser bindings for a few front-end operations: resampler response,
//! mel spectrogram and F0 of a tone, and SSL layer weights from logits.
//!
//! Build with `wasm-pack build crates/demo --target web`, serve
//! `crates/demo/` over HTTP and open `www/index.html`.

use svs_core::dsp::{extract_f0, melspectrogram, resample, AudioConfig, Waveform};
use svs_core::sslfront::softmax;
use wasm_bindgen::prelude::*;

fn js_err(e: svs_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// Gain in dB of resampling a half-second sine at each test frequency.
/// Frequencies at or above the source Nyquist give NaN.
#[wasm_bindgen]
pub fn resampler_response(source_rate: u32, target_rate: u32, freqs_hz: Vec<f64>) -> Result<Vec<f64>, JsError> {
    let mut out = Vec::with_capacity(freqs_hz.len());
    for f in freqs_hz {
        if !(f > 0.0 && f < source_rate as f64 / 2.0) {
            out.push(f64::NAN);
            continue;
        }
        let input = Waveform::sine(f, 0.5, source_rate).map_err(js_err)?;
        let y = resample(&input, target_rate).map_err(js_err)?;
        // Skip the edges, where the kernel runs off the signal.
        let edge = (target_rate / 20) as usize;
        let body = &y.samples()[edge..y.len() - edge];
        out.push(20.0 * (rms(body) / rms(input.samples())).max(1e-12).log10());
    }
    Ok(out)
}

/// Log-mel spectrogram and F0 track of a sine at the default 24 kHz setup.
#[wasm_bindgen]
pub struct ToneAnalysis {
    n_frames: usize,
    n_mels: usize,
    mel: Vec<f64>,
    f0_hz: Vec<f64>,
}

#[wasm_bindgen]
impl ToneAnalysis {
    #[wasm_bindgen(getter)]
    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    #[wasm_bindgen(getter)]
    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    /// Frame-major: `mel[t * n_mels + k]`.
    #[wasm_bindgen(getter)]
    pub fn mel(&self) -> Vec<f64> {
        self.mel.clone()
    }

    /// 0 on unvoiced frames.
    #[wasm_bindgen(getter)]
    pub fn f0_hz(&self) -> Vec<f64> {
        self.f0_hz.clone()
    }
}

#[wasm_bindgen]
pub fn analyze_tone(freq_hz: f64, seconds: f64, amplitude: f64) -> Result<ToneAnalysis, JsError> {
    let cfg = AudioConfig::default();
    let w = Waveform::sine(freq_hz, seconds, cfg.sample_rate_hz)
        .map_err(js_err)?
        .scaled(amplitude);
    let m = melspectrogram(&w, &cfg).map_err(js_err)?;
    let f0 = extract_f0(&w, &cfg);
    Ok(ToneAnalysis {
        n_frames: m.n_frames(),
        n_mels: m.n_mels(),
        mel: m.values.iter().copied().collect(),
        f0_hz: f0.f0_hz,
    })
}

/// Softmax of the per-layer logits.
#[wasm_bindgen]
pub fn layer_weights(logits: Vec<f64>) -> Vec<f64> {
    softmax(&logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn passband_is_flat_and_stopband_is_rejected() {
        let gains = resampler_response(24_000, 16_000, vec![440.0, 2_000.0, 9_000.0, 20_000.0]).unwrap();
        assert!(gains[0].abs() < 0.5 && gains[1].abs() < 0.5, "{gains:?}");
        assert!(gains[2] < -35.0, "{gains:?}");
        assert!(gains[3].is_nan());
    }

    #[test]
    fn tone_analysis_tracks_the_pitch() {
        let a = analyze_tone(220.0, 1.0, 0.5).unwrap();
        assert_eq!(a.n_frames(), 50);
        assert_eq!(a.mel().len(), 50 * a.n_mels());
        let f0 = a.f0_hz();
        assert!((f0[25] - 220.0).abs() < 2.0, "{}", f0[25]);
    }

    #[test]
    fn layer_weights_sum_to_one() {
        let w = layer_weights(vec![0.0, 1.0, -2.0]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w[1] > w[0] && w[0] > w[2]);
    }
}
