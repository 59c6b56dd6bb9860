#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use svs_core::score::{PhonemeInventory, REST};
use svs_model::config::Config;
use svs_model::model::ScoreTensors;
use svs_model::train::{StepInputs, Trainer};

/// A model small enough for finite differences: hop 16, 8 mels, 8 hidden
/// channels, two-stage decoder and two resolutions per discriminator family.
pub fn toy_config() -> Config {
    let mut c = Config::default();
    c.audio.hop = 16;
    c.audio.n_fft = 32;
    c.audio.win_length = 32;
    c.audio.n_mels = 8;
    c.model.n_phonemes = 4;
    c.model.n_speakers = 2;
    c.model.latent_dim = 4;
    c.model.hidden_channels = 8;
    c.model.speaker_emb_dim = 4;
    c.model.encoder_layers = 2;
    c.model.encoder_kernel = 3;
    c.model.decoder_channels = 8;
    c.model.upsample_rates = vec![4, 4];
    c.disc.width = 2;
    c.disc.mrsd_fft_sizes = vec![16, 32];
    c.disc.mpd_periods = vec![2, 3];
    c.disc.msd_scales = 2;
    c.ssl.n_layers = 4;
    c.ssl.dim = 3;
    c.train.segment_frames = 2;
    c.train.iterations_per_epoch = 4;
    c.train.epochs = 2;
    c.train.seed = 11;
    c
}

pub fn inventory(n: usize) -> PhonemeInventory {
    let mut symbols = vec!["SP".to_string()];
    symbols.extend((1..n).map(|i| format!("p{i}")));
    PhonemeInventory::new(symbols).unwrap()
}

pub fn trainer(cfg: &Config, dtype: DType) -> Trainer {
    Trainer::new(cfg, inventory(cfg.model.n_phonemes), dtype).unwrap()
}

/// A random batch with one item per length; speakers alternate.
pub fn toy_inputs(cfg: &Config, lengths: &[usize], seed: u64, dtype: DType) -> StepInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l, d, n_mels, hop) = (cfg.ssl.n_layers, cfg.ssl.dim, cfg.audio.n_mels, cfg.audio.hop);
    let b = lengths.len();
    let t = *lengths.iter().max().unwrap();
    let mut stack = vec![0.0; b * l * t * d];
    let mut mel = vec![0.0; b * n_mels * t];
    let mut phonemes = Vec::new();
    let mut pitches = Vec::new();
    let mut waveforms = Vec::new();
    for (i, &n) in lengths.iter().enumerate() {
        for li in 0..l {
            for f in 0..n {
                for k in 0..d {
                    stack[((i * l + li) * t + f) * d + k] = rng.sample(StandardNormal);
                }
            }
        }
        for k in 0..n_mels {
            for f in 0..n {
                mel[(i * n_mels + k) * t + f] = rng.random_range(-6.0..0.0);
            }
        }
        let mut ph: Vec<usize> = (0..n).map(|_| rng.random_range(1..cfg.model.n_phonemes)).collect();
        let mut pi: Vec<i32> = (0..n).map(|_| rng.random_range(57..=72)).collect();
        let f0 = 440.0 * 2f64.powf((pi[0] - 69) as f64 / 12.0);
        let w: Vec<f64> = (0..n * hop)
            .map(|s| {
                let noise: f64 = rng.sample(StandardNormal);
                0.5 * (2.0 * std::f64::consts::PI * f0 * s as f64 / cfg.audio.sample_rate_hz as f64).sin()
                    + 0.01 * noise
            })
            .collect();
        ph.resize(t, 0);
        pi.resize(t, REST);
        phonemes.push(ph);
        pitches.push(pi);
        waveforms.push(w);
    }
    let dev = Device::Cpu;
    StepInputs {
        speakers: (0..b).map(|i| i % cfg.model.n_speakers).collect(),
        lengths: lengths.to_vec(),
        score: ScoreTensors::new(&phonemes, &pitches, lengths, dtype).unwrap(),
        pitches,
        stack: Tensor::from_vec(stack, (b, l, t, d), &dev).unwrap().to_dtype(dtype).unwrap(),
        mel: Tensor::from_vec(mel, (b, n_mels, t), &dev).unwrap().to_dtype(dtype).unwrap(),
        waveforms,
        hop,
    }
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn to_vec(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
}
