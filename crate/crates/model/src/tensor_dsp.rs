//! Differentiable STFT and log-mel analysis on `(B, N)` sample tensors.
//!
//! Frames are gathered with one index lookup, windowed, and turned into a
//! power spectrum by an FFT-backed custom op whose backward pass is also an
//! FFT. With `center` set, framing and padding match
//! [`svs_core::dsp::MelAnalyzer`] exactly.

use std::sync::Arc;

use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Device, Layout, Shape, Tensor};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use svs_core::dsp::{frame_count, hann_window, reflect_index, AudioConfig, MelAnalyzer, LOG_FLOOR};

use crate::{Error, Result};

fn to_f64(s: &CpuStorage, l: &Layout) -> candle_core::Result<Vec<f64>> {
    let Some((a, b)) = l.contiguous_offsets() else {
        candle_core::bail!("power spectrum expects contiguous input")
    };
    Ok(match s {
        CpuStorage::F32(v) => v[a..b].iter().map(|&x| x as f64).collect(),
        CpuStorage::F64(v) => v[a..b].to_vec(),
        _ => candle_core::bail!("power spectrum supports f32 and f64 only"),
    })
}

fn like(s: &CpuStorage, v: Vec<f64>) -> CpuStorage {
    match s {
        CpuStorage::F32(_) => CpuStorage::F32(v.into_iter().map(|x| x as f32).collect()),
        _ => CpuStorage::F64(v),
    }
}

/// `|rfft(frame)|^2` over the last axis: `(.., n_fft)` to `(.., n_fft/2 + 1)`.
#[derive(Clone)]
struct PowerSpectrum {
    fft: Arc<dyn Fft<f64>>,
}

impl PowerSpectrum {
    fn new(n_fft: usize) -> Self {
        Self {
            fft: FftPlanner::new().plan_fft_forward(n_fft),
        }
    }

    fn n_fft(&self) -> usize {
        self.fft.len()
    }

    fn spectra(&self, frames: &[f64]) -> Vec<Complex<f64>> {
        let mut buf: Vec<Complex<f64>> = frames.iter().map(|&x| Complex::new(x, 0.0)).collect();
        self.fft.process(&mut buf);
        buf
    }
}

impl CustomOp1 for PowerSpectrum {
    fn name(&self) -> &'static str {
        "power-spectrum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = self.n_fft();
        let nb = n / 2 + 1;
        let x = to_f64(s, l)?;
        let spec = self.spectra(&x);
        let out: Vec<f64> = spec.chunks_exact(n).flat_map(|f| f[..nb].iter().map(|c| c.norm_sqr())).collect();
        let mut dims = l.dims().to_vec();
        *dims.last_mut().expect("rank checked by caller") = nb;
        Ok((like(s, out), Shape::from(dims)))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let grad = arg
            .contiguous()?
            .apply_op2_no_bwd(&grad_res.contiguous()?, &PowerSpectrumGrad(self.clone()))?;
        Ok(Some(grad))
    }
}

/// Gradient of [`PowerSpectrum`]: with `Y_k = 2 g_k conj(X_k)` on the
/// non-negative bins and zero elsewhere, `dL/dx = Re(FFT(Y))`.
struct PowerSpectrumGrad(PowerSpectrum);

impl CustomOp2 for PowerSpectrumGrad {
    fn name(&self) -> &'static str {
        "power-spectrum-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = self.0.n_fft();
        let nb = n / 2 + 1;
        let x = to_f64(s1, l1)?;
        let g = to_f64(s2, l2)?;
        let mut spec = self.0.spectra(&x);
        for (frame, gf) in spec.chunks_exact_mut(n).zip(g.chunks_exact(nb)) {
            for (k, c) in frame.iter_mut().enumerate() {
                *c = if k < nb { c.conj() * (2.0 * gf[k]) } else { Complex::new(0.0, 0.0) };
            }
        }
        self.0.fft.process(&mut spec);
        let out = spec.iter().map(|c| c.re).collect();
        Ok((like(s1, out), l1.shape().clone()))
    }
}

#[derive(Clone)]
pub struct TensorStft {
    n_fft: usize,
    hop: usize,
    center: bool,
    window: Tensor,
    power: PowerSpectrum,
}

impl std::fmt::Debug for TensorStft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TensorStft")
            .field("n_fft", &self.n_fft)
            .field("hop", &self.hop)
            .field("center", &self.center)
            .finish()
    }
}

impl TensorStft {
    /// `window` has length `n_fft`.
    pub fn new(n_fft: usize, hop: usize, window: &[f64], center: bool, dtype: DType) -> Result<Self> {
        if window.len() != n_fft || hop == 0 {
            return Err(Error::invalid("window length must equal n_fft and hop must be positive"));
        }
        Ok(Self {
            n_fft,
            hop,
            center,
            window: Tensor::from_slice(window, n_fft, &Device::Cpu)?.to_dtype(dtype)?,
            power: PowerSpectrum::new(n_fft),
        })
    }

    /// Hann-windowed, uncentred.
    pub fn hann(n_fft: usize, hop: usize, dtype: DType) -> Result<Self> {
        Self::new(n_fft, hop, &hann_window(n_fft), false, dtype)
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        if self.center {
            frame_count(n_samples, self.hop)
        } else if n_samples < self.n_fft {
            0
        } else {
            (n_samples - self.n_fft) / self.hop + 1
        }
    }

    /// Windowed frames `(B, frames, n_fft)`.
    fn frames(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n) = x.dims2()?;
        let frames = self.n_frames(n);
        if frames == 0 {
            return Err(Error::invalid(format!(
                "{n} samples is shorter than one {}-point frame",
                self.n_fft
            )));
        }
        let half = if self.center { (self.n_fft / 2) as isize } else { 0 };
        let mut idx = Vec::with_capacity(frames * self.n_fft);
        for f in 0..frames {
            let start = (f * self.hop) as isize - half;
            for k in 0..self.n_fft as isize {
                idx.push(reflect_index(start + k, n) as u32);
            }
        }
        let idx = Tensor::from_vec(idx, frames * self.n_fft, x.device())?;
        Ok(x.index_select(&idx, 1)?
            .reshape((b, frames, self.n_fft))?
            .broadcast_mul(&self.window)?)
    }

    /// `(B, n_bins, frames)`.
    pub fn power(&self, x: &Tensor) -> Result<Tensor> {
        let frames = self.frames(x)?.contiguous()?;
        Ok(frames.apply_op1(self.power.clone())?.transpose(1, 2)?)
    }

    /// `sqrt(power + eps)`; the offset keeps the gradient finite.
    pub fn magnitude(&self, x: &Tensor, eps: f64) -> Result<Tensor> {
        Ok(self.power(x)?.affine(1.0, eps)?.sqrt()?)
    }
}

/// Log-mel analysis equal to [`MelAnalyzer`] but on tensors.
#[derive(Debug, Clone)]
pub struct TensorMel {
    stft: TensorStft,
    /// `(n_mels, n_bins)`.
    filterbank: Tensor,
}

impl TensorMel {
    pub fn new(cfg: &AudioConfig, dtype: DType) -> Result<Self> {
        let analyzer = MelAnalyzer::new(cfg)?;
        let stft = TensorStft::new(cfg.n_fft, cfg.hop, analyzer.window(), true, dtype)?;
        let fb = analyzer.filterbank();
        let filterbank = Tensor::from_iter(fb.iter().copied(), &Device::Cpu)?
            .reshape(fb.dim())?
            .to_dtype(dtype)?;
        Ok(Self { stft, filterbank })
    }

    /// `(B, N)` samples to `(B, n_mels, frames)` natural-log mel energies.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let power = self.stft.power(x)?;
        let mel = self.filterbank.broadcast_matmul(&power)?;
        Ok(mel.clamp(LOG_FLOOR, f64::INFINITY)?.log()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use svs_core::dsp::{melspectrogram, Waveform};

    #[test]
    fn matches_core_mel() {
        let cfg = AudioConfig::default();
        let samples: Vec<f64> = (0..5000)
            .map(|i| (i as f64 * 0.05).sin() * 0.3 + (i as f64 * 0.31).cos() * 0.1)
            .collect();
        let w = Waveform::new(samples.clone(), 24_000).unwrap();
        let want = melspectrogram(&w, &cfg).unwrap();
        let x = Tensor::from_vec(samples, (1, 5000), &Device::Cpu).unwrap();
        let got = TensorMel::new(&cfg, DType::F64).unwrap().forward(&x).unwrap();
        assert_eq!(got.dims(), &[1, 80, want.n_frames()]);
        let got = got.squeeze(0).unwrap().t().unwrap().to_vec2::<f64>().unwrap();
        for (t, row) in got.iter().enumerate() {
            for (m, v) in row.iter().enumerate() {
                assert!((v - want.values[[t, m]]).abs() < 1e-6, "frame {t} mel {m}");
            }
        }
    }

    #[test]
    fn power_gradient_matches_finite_differences() {
        let stft = TensorStft::hann(16, 4, DType::F64).unwrap();
        let x0: Vec<f64> = (0..40).map(|i| ((i * 7 % 11) as f64 - 5.0) / 7.0).collect();
        let weights: Vec<f64> = (0..9 * 7).map(|i| ((i * 5 % 13) as f64) / 13.0).collect();
        let w = Tensor::from_vec(weights, (1, 9, 7), &Device::Cpu).unwrap();
        let loss = |x: &[f64]| -> f64 {
            let x = Tensor::from_slice(x, (1, 40), &Device::Cpu).unwrap();
            stft.power(&x).unwrap().mul(&w).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
        };
        let var = candle_core::Var::from_slice(&x0, (1, 40), &Device::Cpu).unwrap();
        let l = stft.power(var.as_tensor()).unwrap().mul(&w).unwrap().sum_all().unwrap();
        let grad = l.backward().unwrap().get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for i in 0..40 {
            let (mut p, mut m) = (x0.clone(), x0.clone());
            p[i] += 1e-5;
            m[i] -= 1e-5;
            let fd = (loss(&p) - loss(&m)) / 2e-5;
            assert!((fd - grad[i]).abs() <= 1e-6 * fd.abs().max(1.0), "sample {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn uncentred_frame_count() {
        let stft = TensorStft::hann(512, 128, DType::F32).unwrap();
        assert_eq!(stft.n_frames(511), 0);
        assert_eq!(stft.n_frames(512), 1);
        assert_eq!(stft.n_frames(1024), 5);
        let x = Tensor::zeros((2, 300), DType::F32, &Device::Cpu).unwrap();
        assert!(stft.power(&x).is_err());
    }

    #[test]
    fn sine_peaks_at_its_bin() {
        let n_fft = 256;
        let stft = TensorStft::hann(n_fft, 64, DType::F64).unwrap();
        let bin = 20.0;
        let x: Vec<f64> = (0..1024)
            .map(|i| (2.0 * std::f64::consts::PI * bin * i as f64 / n_fft as f64).sin())
            .collect();
        let x = Tensor::from_vec(x, (1, 1024), &Device::Cpu).unwrap();
        let mag = stft.magnitude(&x, 0.0).unwrap().squeeze(0).unwrap().t().unwrap();
        for row in mag.to_vec2::<f64>().unwrap() {
            let arg = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(arg, 20);
        }
    }
}
