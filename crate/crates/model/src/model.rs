//! The generator: score-driven prior encoder, posterior encoder over fused
//! SSL + mel features, and an upsampling decoder with a sine excitation
//! channel.
//!
//! Tensors are channels-first, `(B, C, T)`, with `T` in frames for the
//! encoders and in samples for decoder output.

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use svs_core::dsp::Waveform;
use svs_core::score::{length_regulate, midi_to_hz, FrameScore, MusicScore};
use svs_core::sslfront::FusedEmbedding;

use crate::config::Config;
use crate::params::{leaky_relu, Conv1d, Embedding, ParamStore, Upsample};
use crate::{Error, Result};

/// Bound on `log_var` in both directions.
pub const LOG_VAR_LIMIT: f64 = 14.0;
const LEAK: f64 = 0.1;
/// Pitch embedding rows: index 0 is a rest, `midi + 1` otherwise.
pub const PITCH_ROWS: usize = 129;

/// Per-frame diagonal Gaussian, `(B, latent, T)` mean and log-variance.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    pub mean: Tensor,
    pub log_var: Tensor,
}

impl GaussianParams {
    pub fn n_frames(&self) -> Result<usize> {
        Ok(self.mean.dim(2)?)
    }

    /// Frames `start..start + len` of every item.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            mean: self.mean.narrow(2, start, len)?,
            log_var: self.log_var.narrow(2, start, len)?,
        })
    }

    /// Item `b` as `frames x latent` matrices `(mean, log_var)`.
    pub fn item(&self, b: usize) -> Result<(Array2<f64>, Array2<f64>)> {
        let get = |t: &Tensor| -> Result<Array2<f64>> {
            let rows = t.get(b)?.t()?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            let (f, l) = (rows.len(), rows.first().map_or(0, Vec::len));
            Ok(Array2::from_shape_vec((f, l), rows.concat()).expect("rectangular"))
        };
        Ok((get(&self.mean)?, get(&self.log_var)?))
    }
}

/// `z = mean + exp(log_var / 2) * noise`.
pub fn reparameterize(p: &GaussianParams, noise: &Tensor) -> Result<Tensor> {
    if noise.dims() != p.mean.dims() || p.log_var.dims() != p.mean.dims() {
        return Err(Error::invalid(format!(
            "noise shape {:?} does not match params {:?}",
            noise.dims(),
            p.mean.dims()
        )));
    }
    Ok((&p.mean + (p.log_var.affine(0.5, 0.0)?.exp()? * noise)?)?)
}

/// Standard normal tensor drawn from `rng`.
pub fn standard_normal(rng: &mut impl Rng, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn pitch_index(midi: i32) -> u32 {
    if midi < 0 {
        0
    } else {
        (midi as u32 + 1).min(PITCH_ROWS as u32 - 1)
    }
}

/// Sample-rate sine at each frame's score pitch, silent on rests. Phase is
/// continuous across frames.
pub fn sine_excitation(pitch_per_frame: &[i32], hop: usize, sample_rate_hz: u32) -> Vec<f64> {
    let mut out = Vec::with_capacity(pitch_per_frame.len() * hop);
    let mut phase = 0.0f64;
    let step = 2.0 * std::f64::consts::PI / sample_rate_hz as f64;
    for &p in pitch_per_frame {
        let f = midi_to_hz(p);
        for _ in 0..hop {
            if f > 0.0 {
                phase = (phase + step * f) % (2.0 * std::f64::consts::PI);
                out.push(phase.sin());
            } else {
                out.push(0.0);
            }
        }
    }
    out
}

fn softmax_1d(logits: &Tensor) -> Result<Tensor> {
    let shifted = logits.broadcast_sub(&logits.max_keepdim(0)?.detach())?;
    let e = shifted.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(0)?)?)
}

#[derive(Debug, Clone)]
struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            weight: store.normal(&format!("{name}.weight"), &[c_out, c_in], (1.0 / c_in as f64).sqrt())?,
            bias: store.zeros(&format!("{name}.bias"), &[c_out])?,
        })
    }

    /// `(B, in)` to `(B, out)`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Input projection, speaker bias, masked residual dilated convolutions and
/// a projection to `(mean, log_var)`.
#[derive(Debug, Clone)]
struct EncoderStack {
    input: Conv1d,
    speaker: Linear,
    layers: Vec<Conv1d>,
    proj: Conv1d,
    latent: usize,
}

impl EncoderStack {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, cfg: &Config) -> Result<Self> {
        let m = &cfg.model;
        let h = m.hidden_channels;
        let layers = (0..m.encoder_layers)
            .map(|i| Conv1d::same(store, &format!("{name}.layers.{i}"), h, h, m.encoder_kernel, 1 << i))
            .collect::<Result<_>>()?;
        Ok(Self {
            input: Conv1d::same(store, &format!("{name}.input"), c_in, h, 1, 1)?,
            speaker: Linear::new(store, &format!("{name}.speaker"), m.speaker_emb_dim, h)?,
            layers,
            // Small output weights keep initial means and log-variances near
            // zero, so the first KL values are moderate.
            proj: Conv1d::with_std(store, &format!("{name}.proj"), h, 2 * m.latent_dim, 1, 1, 1, (0, 0), 0.1 / (h as f64).sqrt())?,
            latent: m.latent_dim,
        })
    }

    fn forward(&self, x: &Tensor, speaker: &Tensor, mask: &Tensor) -> Result<GaussianParams> {
        let spk = self.speaker.forward(speaker)?.unsqueeze(2)?;
        let mut h = self
            .input
            .forward(&x.broadcast_mul(mask)?)?
            .broadcast_add(&spk)?
            .broadcast_mul(mask)?;
        for layer in &self.layers {
            h = (&h + layer.forward(&leaky_relu(&h, LEAK)?)?)?.broadcast_mul(mask)?;
        }
        let out = self.proj.forward(&h)?.broadcast_mul(mask)?;
        Ok(GaussianParams {
            mean: out.narrow(1, 0, self.latent)?,
            log_var: out
                .narrow(1, self.latent, self.latent)?
                .clamp(-LOG_VAR_LIMIT, LOG_VAR_LIMIT)?,
        })
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    pre: Conv1d,
    excitation_in: Conv1d,
    ups: Vec<Upsample>,
    excitation: Vec<Conv1d>,
    res: Vec<Vec<Conv1d>>,
    post: Conv1d,
}

/// Channel width after upsampling stage `i`.
fn stage_channels(c0: usize, i: usize) -> usize {
    (c0 >> (i + 1)).max(8)
}

impl Decoder {
    fn new(store: &mut ParamStore, cfg: &Config) -> Result<Self> {
        let m = &cfg.model;
        let c0 = m.decoder_channels;
        let hop = cfg.audio.hop;
        let mut ups = Vec::new();
        let mut excitation = Vec::new();
        let mut res = Vec::new();
        let mut c_prev = c0;
        let mut remaining = hop;
        for (i, &r) in m.upsample_rates.iter().enumerate() {
            let c = stage_channels(c0, i);
            remaining /= r;
            ups.push(Upsample::new(store, &format!("dec.ups.{i}"), c_prev, c, r)?);
            excitation.push(Conv1d::new(
                store,
                &format!("dec.excitation.{i}"),
                1,
                c,
                remaining,
                remaining,
                1,
                (0, 0),
            )?);
            res.push(vec![
                Conv1d::same(store, &format!("dec.res.{i}.0"), c, c, 3, 1)?,
                Conv1d::same(store, &format!("dec.res.{i}.1"), c, c, 3, 3)?,
            ]);
            c_prev = c;
        }
        Ok(Self {
            pre: Conv1d::same(store, "dec.pre", m.latent_dim + m.speaker_emb_dim, c0, 7, 1)?,
            excitation_in: Conv1d::new(store, "dec.excitation_in", 1, c0, hop, hop, 1, (0, 0))?,
            ups,
            excitation,
            res,
            post: Conv1d::with_std(store, "dec.post", c_prev, 1, 7, 1, 1, (3, 3), 0.1 / ((7 * c_prev) as f64).sqrt())?,
        })
    }

    /// `z (B, latent, S)`, `speaker (B, E)`, `excitation (B, 1, S * hop)`.
    fn forward(&self, z: &Tensor, speaker: &Tensor, excitation: &Tensor) -> Result<Tensor> {
        let (b, _, s) = z.dims3()?;
        let spk = speaker.unsqueeze(2)?.broadcast_as((b, speaker.dim(1)?, s))?;
        let mut x = (self.pre.forward(&Tensor::cat(&[z, &spk.contiguous()?], 1)?)?
            + self.excitation_in.forward(excitation)?)?;
        for ((up, exc), res) in self.ups.iter().zip(&self.excitation).zip(&self.res) {
            x = up.forward(&leaky_relu(&x, LEAK)?)?;
            x = (x + exc.forward(excitation)?)?;
            for conv in res {
                x = (&x + conv.forward(&leaky_relu(&x, LEAK)?)?)?;
            }
        }
        Ok(self.post.forward(&leaky_relu(&x, LEAK)?)?.tanh()?)
    }
}

/// Per-frame score conditioning for a batch.
#[derive(Debug, Clone)]
pub struct ScoreTensors {
    /// `(B, T)` phoneme ids.
    pub phonemes: Tensor,
    /// `(B, T)` pitch embedding rows, see [`pitch_index`].
    pub pitches: Tensor,
    /// `(B, 1, T)`, 1 on real frames.
    pub mask: Tensor,
}

impl ScoreTensors {
    /// Rows are right-padded with phoneme 0 / rest up to the longest item;
    /// `lengths[b]` frames of row `b` are real.
    pub fn new(phonemes: &[Vec<usize>], pitches: &[Vec<i32>], lengths: &[usize], dtype: DType) -> Result<Self> {
        let b = phonemes.len();
        if pitches.len() != b || lengths.len() != b {
            return Err(Error::invalid("phoneme, pitch and length rows disagree"));
        }
        let t = lengths.iter().copied().max().unwrap_or(0);
        let mut ph = vec![0u32; b * t];
        let mut pi = vec![0u32; b * t];
        let mut mask = vec![0.0f64; b * t];
        for i in 0..b {
            let n = lengths[i];
            if phonemes[i].len() < n || pitches[i].len() < n {
                return Err(Error::invalid(format!("row {i} is shorter than its length {n}")));
            }
            for f in 0..n {
                ph[i * t + f] = phonemes[i][f] as u32;
                pi[i * t + f] = pitch_index(pitches[i][f]);
                mask[i * t + f] = 1.0;
            }
        }
        let dev = Device::Cpu;
        Ok(Self {
            phonemes: Tensor::from_vec(ph, (b, t), &dev)?,
            pitches: Tensor::from_vec(pi, (b, t), &dev)?,
            mask: Tensor::from_vec(mask, (b, 1, t), &dev)?.to_dtype(dtype)?,
        })
    }

    pub fn from_frame_score(fs: &FrameScore, dtype: DType) -> Result<Self> {
        Self::new(
            std::slice::from_ref(&fs.phoneme_per_frame),
            std::slice::from_ref(&fs.pitch_per_frame),
            &[fs.n_frames],
            dtype,
        )
    }
}

/// Prior encoder, posterior encoder, decoder, speaker table and SSL layer
/// logits, all stored in one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Generator {
    cfg: Config,
    dtype: DType,
    phoneme_emb: Embedding,
    pitch_emb: Embedding,
    prior: EncoderStack,
    posterior: EncoderStack,
    decoder: Decoder,
    speakers: Embedding,
    layer_logits: Tensor,
}

/// Name of the SSL layer-logit parameter.
pub const LAYER_LOGITS: &str = "ssl.layer_logits";
/// Name of the speaker table parameter.
pub const SPEAKER_TABLE: &str = "speakers";

impl Generator {
    pub fn new(cfg: &Config, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        let h = m.hidden_channels;
        Ok(Self {
            cfg: cfg.clone(),
            dtype: store.dtype(),
            phoneme_emb: Embedding::new(store, "prior.phoneme_emb", m.n_phonemes, h, 1.0)?,
            pitch_emb: Embedding::new(store, "prior.pitch_emb", PITCH_ROWS, h, 1.0)?,
            prior: EncoderStack::new(store, "prior", h, cfg)?,
            posterior: EncoderStack::new(store, "posterior", cfg.fused_dim(), cfg)?,
            decoder: Decoder::new(store, cfg)?,
            speakers: Embedding::new(store, SPEAKER_TABLE, m.n_speakers, m.speaker_emb_dim, 1.0)?,
            layer_logits: store.zeros(LAYER_LOGITS, &[cfg.ssl.n_layers])?,
        })
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// `(B, E)` speaker rows; unknown ids are rejected.
    pub fn speaker_rows(&self, ids: &[usize]) -> Result<Tensor> {
        let n = self.speakers.n_entries();
        if let Some(bad) = ids.iter().find(|&&s| s >= n) {
            return Err(Error::invalid(format!("speaker {bad} is out of range (model has {n})")));
        }
        let idx: Vec<u32> = ids.iter().map(|&s| s as u32).collect();
        self.speakers.rows(&Tensor::new(idx.as_slice(), &Device::Cpu)?)
    }

    pub fn encode_prior(&self, score: &ScoreTensors, speakers: &[usize]) -> Result<GaussianParams> {
        let x = (self.phoneme_emb.forward(&score.phonemes)? + self.pitch_emb.forward(&score.pitches)?)?;
        self.prior.forward(&x, &self.speaker_rows(speakers)?, &score.mask)
    }

    /// Single-utterance prior over `fs.n_frames` frames.
    pub fn encode_prior_frames(&self, fs: &FrameScore, speaker: usize) -> Result<GaussianParams> {
        self.encode_prior(&ScoreTensors::from_frame_score(fs, self.dtype)?, &[speaker])
    }

    /// `softmax(logits)` over SSL layers.
    pub fn layer_weights(&self) -> Result<Tensor> {
        softmax_1d(&self.layer_logits)
    }

    /// Weighted sum of a `(B, L, T, D)` stack, returned as `(B, D, T)`.
    pub fn aggregate(&self, stack: &Tensor) -> Result<Tensor> {
        let l = stack.dim(1)?;
        if l != self.cfg.ssl.n_layers {
            return Err(Error::invalid(format!(
                "stack has {l} layers, model expects {}",
                self.cfg.ssl.n_layers
            )));
        }
        let w = self.layer_weights()?.reshape((1, l, 1, 1))?;
        Ok(stack.broadcast_mul(&w)?.sum(1)?.transpose(1, 2)?)
    }

    /// Posterior over a fused `(B, D + n_mels, T)` input.
    pub fn encode_posterior(&self, fused: &Tensor, speakers: &[usize], mask: &Tensor) -> Result<GaussianParams> {
        let c = fused.dim(1)?;
        if c != self.cfg.fused_dim() {
            return Err(Error::invalid(format!(
                "posterior input has {c} channels, expected {}",
                self.cfg.fused_dim()
            )));
        }
        self.posterior.forward(fused, &self.speaker_rows(speakers)?, mask)
    }

    /// Aggregates `stack (B, L, T, D)`, concatenates `mel (B, n_mels, T)`
    /// and encodes.
    pub fn encode_posterior_from_stack(
        &self,
        stack: &Tensor,
        mel: &Tensor,
        speakers: &[usize],
        mask: &Tensor,
    ) -> Result<GaussianParams> {
        let r = self.aggregate(stack)?;
        let fused = Tensor::cat(&[&r, mel], 1)?;
        self.encode_posterior(&fused, speakers, mask)
    }

    /// Single-utterance posterior from an already fused embedding.
    pub fn encode_posterior_embedding(&self, e: &FusedEmbedding, speaker: usize) -> Result<GaussianParams> {
        let (f, c) = e.values.dim();
        let x = Tensor::from_iter(e.values.iter().copied(), &Device::Cpu)?
            .reshape((1, f, c))?
            .transpose(1, 2)?
            .to_dtype(self.dtype)?;
        let mask = Tensor::ones((1, 1, f), self.dtype, &Device::Cpu)?;
        self.encode_posterior(&x, &[speaker], &mask)
    }

    /// `z (B, latent, S)` to `(B, 1, S * hop)` samples in `[-1, 1]`.
    pub fn decode(&self, z: &Tensor, speakers: &[usize], pitches: &[Vec<i32>]) -> Result<Tensor> {
        let (b, _, s) = z.dims3()?;
        if pitches.len() != b || pitches.iter().any(|p| p.len() != s) {
            return Err(Error::invalid(format!(
                "decoder needs {b} pitch rows of {s} frames"
            )));
        }
        let hop = self.cfg.audio.hop;
        let exc: Vec<f64> = pitches
            .iter()
            .flat_map(|p| sine_excitation(p, hop, self.cfg.audio.sample_rate_hz))
            .collect();
        let exc = Tensor::from_vec(exc, (b, 1, s * hop), &Device::Cpu)?.to_dtype(self.dtype)?;
        self.decoder.forward(z, &self.speaker_rows(speakers)?, &exc)
    }

    /// Score to waveform through the prior only; no audio or SSL features
    /// are involved.
    pub fn synthesize(&self, score: &MusicScore, speaker: usize, seed: u64) -> Result<Waveform> {
        let fs = length_regulate(score, self.cfg.audio.frame_rate_hz())?;
        self.synthesize_frames(&fs, speaker, seed)
    }

    pub fn synthesize_frames(&self, fs: &FrameScore, speaker: usize, seed: u64) -> Result<Waveform> {
        let prior = self.encode_prior_frames(fs, speaker)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = standard_normal(&mut rng, prior.mean.dims(), self.dtype)?;
        let z = reparameterize(&prior, &noise)?;
        let y = self.decode(&z, &[speaker], std::slice::from_ref(&fs.pitch_per_frame))?;
        let samples = y.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        Ok(Waveform::new(samples, self.cfg.audio.sample_rate_hz)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (Config, ParamStore, Generator) {
        let mut cfg = Config::default();
        cfg.model.n_speakers = 2;
        cfg.model.hidden_channels = 16;
        cfg.model.decoder_channels = 16;
        let mut store = ParamStore::new(7, DType::F64);
        let g = Generator::new(&cfg, &mut store).unwrap();
        (cfg, store, g)
    }

    fn frame_score(n: usize) -> FrameScore {
        let fs_ph: Vec<usize> = (0..n).map(|i| 1 + i % 4).collect();
        let fs_pi: Vec<i32> = (0..n).map(|i| if i % 10 == 9 { -1 } else { 60 + (i % 5) as i32 }).collect();
        FrameScore {
            phoneme_per_frame: fs_ph,
            pitch_per_frame: fs_pi,
            n_frames: n,
            event_frames: vec![n],
        }
    }

    #[test]
    fn reparameterize_cases() {
        let dev = Device::Cpu;
        let mean = Tensor::new(&[[[0.5f64, -1.0]]], &dev).unwrap();
        let n = Tensor::new(&[[[0.3f64, -2.0]]], &dev).unwrap();
        let zeros = mean.zeros_like().unwrap();
        let p = GaussianParams {
            mean: mean.clone(),
            log_var: zeros.clone(),
        };
        let z = reparameterize(&p, &zeros).unwrap();
        assert_eq!(z.to_vec3::<f64>().unwrap(), mean.to_vec3::<f64>().unwrap());
        let d = (reparameterize(&p, &n).unwrap() - &mean).unwrap();
        for (a, b) in d.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().zip([0.3, -2.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        let p2 = GaussianParams {
            mean: mean.clone(),
            log_var: zeros.affine(0.0, 2.0 * 2f64.ln()).unwrap(),
        };
        let d = (reparameterize(&p2, &n).unwrap() - &mean).unwrap();
        for (a, b) in d.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().zip([0.6, -4.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let bad = Tensor::zeros((1, 1, 3), DType::F64, &dev).unwrap();
        assert!(reparameterize(&p, &bad).is_err());
    }

    #[test]
    fn prior_shapes_and_determinism() {
        let (_, _, g) = tiny();
        let fs = frame_score(50);
        let a = g.encode_prior_frames(&fs, 0).unwrap();
        assert_eq!(a.mean.dims(), &[1, 32, 50]);
        let (m, lv) = a.item(0).unwrap();
        assert_eq!(m.dim(), (50, 32));
        assert_eq!(lv.dim(), (50, 32));
        let b = g.encode_prior_frames(&fs, 0).unwrap();
        assert_eq!(a.item(0).unwrap(), b.item(0).unwrap());
        let c = g.encode_prior_frames(&fs, 1).unwrap();
        assert_ne!(a.item(0).unwrap().0, c.item(0).unwrap().0);
        assert!(g.encode_prior_frames(&fs, 2).is_err());
    }

    #[test]
    fn excitation_follows_pitch() {
        let e = sine_excitation(&[69, -1], 480, 24_000);
        assert_eq!(e.len(), 960);
        assert!(e[480..].iter().all(|&v| v == 0.0));
        // 440 Hz at 24 kHz: one period is 54.5 samples.
        let crossings = e[..480].windows(2).filter(|w| w[0] < 0.0 && w[1] >= 0.0).count();
        assert!((8..=9).contains(&crossings), "{crossings}");
    }

    #[test]
    fn pitch_rows() {
        assert_eq!(pitch_index(-1), 0);
        assert_eq!(pitch_index(0), 1);
        assert_eq!(pitch_index(127), 128);
    }

    #[test]
    fn layer_weights_start_uniform() {
        let (_, _, g) = tiny();
        let w = g.layer_weights().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(w.len(), 4);
        for v in w {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }
}
