//! Flat `section.key = value` configuration covering audio analysis, model
//! and discriminator shapes, training hyperparameters and the SSL provider.

use std::path::{Path, PathBuf};

use svs_core::dsp::AudioConfig;
use svs_core::sslfront::ProviderConfig;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_phonemes: usize,
    pub n_speakers: usize,
    pub latent_dim: usize,
    pub hidden_channels: usize,
    pub speaker_emb_dim: usize,
    pub encoder_layers: usize,
    pub encoder_kernel: usize,
    pub decoder_channels: usize,
    /// Product must equal the hop size.
    pub upsample_rates: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_phonemes: 6,
            n_speakers: 1,
            latent_dim: 32,
            hidden_channels: 64,
            speaker_emb_dim: 16,
            encoder_layers: 4,
            encoder_kernel: 5,
            decoder_channels: 64,
            upsample_rates: vec![8, 6, 5, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscConfig {
    /// Channels of the first layer; deeper layers use 2x and 4x.
    pub width: usize,
    pub mrsd_fft_sizes: Vec<usize>,
    pub mpd_periods: Vec<usize>,
    pub msd_scales: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            width: 8,
            mrsd_fft_sizes: vec![512, 1024, 2048],
            mpd_periods: vec![2, 3, 5, 7, 11],
            msd_scales: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Per-epoch exponential decay factor.
    pub lr_gamma: f64,
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub batch_size: usize,
    pub segment_frames: usize,
    pub seed: u64,
    pub lambda_mel: f64,
    pub lambda_fm: f64,
    pub lambda_kl: f64,
    /// When false the discriminators are not updated and contribute no
    /// generator loss.
    pub adversarial: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr: 2.0e-4,
            beta1: 0.8,
            beta2: 0.99,
            eps: 1.0e-9,
            weight_decay: 0.0,
            lr_gamma: 0.998,
            epochs: 5,
            iterations_per_epoch: 100,
            batch_size: 2,
            segment_frames: 32,
            seed: 1234,
            lambda_mel: 45.0,
            lambda_fm: 2.0,
            lambda_kl: 1.0,
            adversarial: true,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("train.lr must be positive");
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return bad("train.lr_gamma must be in (0, 1]");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("train.beta1 and train.beta2 must be in (0, 1)");
        }
        if self.batch_size == 0 || self.segment_frames == 0 {
            return bad("train.batch_size and train.segment_frames must be positive");
        }
        Ok(())
    }

    /// Learning rate in effect during epoch `epoch` (0-based).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr * self.lr_gamma.powi(epoch as i32)
    }
}

/// Everything a training run or a checkpoint needs to rebuild the networks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub audio: AudioConfig,
    pub model: ModelConfig,
    pub disc: DiscConfig,
    pub train: TrainingConfig,
    pub ssl: ProviderConfig,
}

fn parse_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|e| format!("{s:?}: {e}")))
        .collect()
}

fn show_list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("{v:?}: {e}"))
}

impl Config {
    /// Small widths and 5 x 100 iterations; trains in minutes on a CPU.
    pub fn desk() -> Self {
        Self::default()
    }

    /// Full-size widths and schedule (200 epochs of 1000 iterations,
    /// 512-channel decoder, 1024-dim 25-layer external features).
    pub fn full() -> Self {
        let mut c = Self::default();
        c.model.decoder_channels = 512;
        c.disc.width = 32;
        c.train.epochs = 200;
        c.train.iterations_per_epoch = 1000;
        c.ssl.name = "external".into();
        c.ssl.n_layers = 25;
        c.ssl.dim = 1024;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::invalid(format!("unknown preset {other:?} (expected desk or full)"))),
        }
    }

    /// Sets one `section.key`. Errors name the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_inner(key, value.trim())
            .map_err(|m| Error::invalid(format!("{key}: {m}")))
    }

    fn set_inner(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let (a, m, d, t, s) = (
            &mut self.audio,
            &mut self.model,
            &mut self.disc,
            &mut self.train,
            &mut self.ssl,
        );
        match key {
            "audio.sample_rate_hz" => a.sample_rate_hz = parse(v)?,
            "audio.hop" => a.hop = parse(v)?,
            "audio.n_fft" => a.n_fft = parse(v)?,
            "audio.win_length" => a.win_length = parse(v)?,
            "audio.n_mels" => a.n_mels = parse(v)?,
            "audio.fmin" => a.fmin = parse(v)?,
            "audio.fmax" => a.fmax = parse(v)?,
            "audio.ssl_input_rate_hz" => a.ssl_input_rate_hz = parse(v)?,
            "model.n_phonemes" => m.n_phonemes = parse(v)?,
            "model.n_speakers" => m.n_speakers = parse(v)?,
            "model.latent_dim" => m.latent_dim = parse(v)?,
            "model.hidden_channels" => m.hidden_channels = parse(v)?,
            "model.speaker_emb_dim" => m.speaker_emb_dim = parse(v)?,
            "model.encoder_layers" => m.encoder_layers = parse(v)?,
            "model.encoder_kernel" => m.encoder_kernel = parse(v)?,
            "model.decoder_channels" => m.decoder_channels = parse(v)?,
            "model.upsample_rates" => m.upsample_rates = parse_list(v)?,
            "disc.width" => d.width = parse(v)?,
            "disc.mrsd_fft_sizes" => d.mrsd_fft_sizes = parse_list(v)?,
            "disc.mpd_periods" => d.mpd_periods = parse_list(v)?,
            "disc.msd_scales" => d.msd_scales = parse(v)?,
            "train.lr" => t.lr = parse(v)?,
            "train.beta1" => t.beta1 = parse(v)?,
            "train.beta2" => t.beta2 = parse(v)?,
            "train.eps" => t.eps = parse(v)?,
            "train.weight_decay" => t.weight_decay = parse(v)?,
            "train.lr_gamma" => t.lr_gamma = parse(v)?,
            "train.epochs" => t.epochs = parse(v)?,
            "train.iterations_per_epoch" => t.iterations_per_epoch = parse(v)?,
            "train.batch_size" => t.batch_size = parse(v)?,
            "train.segment_frames" => t.segment_frames = parse(v)?,
            "train.seed" => t.seed = parse(v)?,
            "train.lambda_mel" => t.lambda_mel = parse(v)?,
            "train.lambda_fm" => t.lambda_fm = parse(v)?,
            "train.lambda_kl" => t.lambda_kl = parse(v)?,
            "train.adversarial" => t.adversarial = parse(v)?,
            "ssl.name" => s.name = v.to_string(),
            "ssl.seed" => s.seed = parse(v)?,
            "ssl.n_layers" => s.n_layers = parse(v)?,
            "ssl.dim" => s.dim = parse(v)?,
            "ssl.dir" => s.dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "ssl.input_rate_hz" => s.input_rate_hz = parse(v)?,
            "ssl.frame_rate_hz" => s.frame_rate_hz = parse(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (a, m, d, t, s) = (&self.audio, &self.model, &self.disc, &self.train, &self.ssl);
        vec![
            ("audio.sample_rate_hz", a.sample_rate_hz.to_string()),
            ("audio.hop", a.hop.to_string()),
            ("audio.n_fft", a.n_fft.to_string()),
            ("audio.win_length", a.win_length.to_string()),
            ("audio.n_mels", a.n_mels.to_string()),
            ("audio.fmin", a.fmin.to_string()),
            ("audio.fmax", a.fmax.to_string()),
            ("audio.ssl_input_rate_hz", a.ssl_input_rate_hz.to_string()),
            ("model.n_phonemes", m.n_phonemes.to_string()),
            ("model.n_speakers", m.n_speakers.to_string()),
            ("model.latent_dim", m.latent_dim.to_string()),
            ("model.hidden_channels", m.hidden_channels.to_string()),
            ("model.speaker_emb_dim", m.speaker_emb_dim.to_string()),
            ("model.encoder_layers", m.encoder_layers.to_string()),
            ("model.encoder_kernel", m.encoder_kernel.to_string()),
            ("model.decoder_channels", m.decoder_channels.to_string()),
            ("model.upsample_rates", show_list(&m.upsample_rates)),
            ("disc.width", d.width.to_string()),
            ("disc.mrsd_fft_sizes", show_list(&d.mrsd_fft_sizes)),
            ("disc.mpd_periods", show_list(&d.mpd_periods)),
            ("disc.msd_scales", d.msd_scales.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.eps", t.eps.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.lr_gamma", t.lr_gamma.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.iterations_per_epoch", t.iterations_per_epoch.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.segment_frames", t.segment_frames.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.lambda_mel", t.lambda_mel.to_string()),
            ("train.lambda_fm", t.lambda_fm.to_string()),
            ("train.lambda_kl", t.lambda_kl.to_string()),
            ("train.adversarial", t.adversarial.to_string()),
            ("ssl.name", s.name.clone()),
            ("ssl.seed", s.seed.to_string()),
            ("ssl.n_layers", s.n_layers.to_string()),
            ("ssl.dim", s.dim.to_string()),
            (
                "ssl.dir",
                s.dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
            ("ssl.input_rate_hz", s.input_rate_hz.to_string()),
            ("ssl.frame_rate_hz", s.frame_rate_hz.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are skipped.
    /// An optional `preset = desk|full` must come before any other key.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen_key = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Config { line: i + 1, message };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let k = k.trim();
            if k == "preset" {
                if seen_key {
                    return Err(err("preset must precede every other key".into()));
                }
                cfg = Self::preset(v.trim()).map_err(|e| err(e.to_string()))?;
            } else {
                cfg.set(k, v).map_err(|e| err(e.to_string()))?;
            }
            seen_key = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.audio.validate()?;
        self.train.validate()?;
        let m = &self.model;
        if [m.n_phonemes, m.n_speakers, m.latent_dim, m.hidden_channels, m.speaker_emb_dim]
            .iter()
            .chain([m.encoder_layers, m.encoder_kernel, m.decoder_channels].iter())
            .any(|&v| v == 0)
        {
            return Err(Error::invalid("model sizes must be positive"));
        }
        if m.encoder_kernel.is_multiple_of(2) {
            return Err(Error::invalid("model.encoder_kernel must be odd"));
        }
        let up: usize = m.upsample_rates.iter().product();
        if m.upsample_rates.is_empty() || up != self.audio.hop {
            return Err(Error::invalid(format!(
                "model.upsample_rates multiply to {up}, audio.hop is {}",
                self.audio.hop
            )));
        }
        if self.disc.width == 0 || self.disc.msd_scales == 0 || self.disc.mrsd_fft_sizes.is_empty() {
            return Err(Error::invalid("discriminator sizes must be positive"));
        }
        if self.disc.mrsd_fft_sizes.iter().any(|&n| n < 4) || self.disc.mpd_periods.contains(&0) {
            return Err(Error::invalid("invalid discriminator resolutions"));
        }
        if self.ssl.n_layers == 0 || self.ssl.dim == 0 {
            return Err(Error::invalid("ssl.n_layers and ssl.dim must be positive"));
        }
        Ok(())
    }

    /// Posterior encoder input width `D + n_mels`.
    pub fn fused_dim(&self) -> usize {
        self.ssl.dim + self.audio.n_mels
    }
}
