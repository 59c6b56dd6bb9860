//! Multi-layer SSL features: providers, learnable weighted-sum aggregation,
//! frame alignment and fusion with the mel-spectrogram.
//!
//! The aggregated representation is `r = sum_i alpha_i * h_i` with
//! `alpha = softmax(logits)`, and the posterior encoder input is the
//! per-frame concatenation `[r, m]`.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{concatenate, s, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dsp::{resample, AudioConfig, MelAnalyzer, MelSpectrogram, Waveform};
use crate::{Error, Result};

/// Hidden states of every layer, `L x frames x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct SslFeatureStack {
    pub layers: Array3<f64>,
    pub frame_rate_hz: f64,
    pub provider_name: String,
}

impl SslFeatureStack {
    pub fn new(layers: Array3<f64>, frame_rate_hz: f64, provider_name: impl Into<String>) -> Result<Self> {
        if layers.dim().0 == 0 {
            return Err(Error::invalid("feature stack needs at least one layer"));
        }
        if layers.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature stack contains non-finite values"));
        }
        Ok(Self {
            layers,
            frame_rate_hz,
            provider_name: provider_name.into(),
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.dim().0
    }

    pub fn n_frames(&self) -> usize {
        self.layers.dim().1
    }

    pub fn dim(&self) -> usize {
        self.layers.dim().2
    }
}

/// Trainable layer logits. The effective weights are their softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub logits: Vec<f64>,
}

impl LayerWeights {
    /// Equal logits: every layer weighted `1/L`.
    pub fn uniform(n_layers: usize) -> Self {
        Self {
            logits: vec![0.0; n_layers],
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.logits)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// The aggregated representation `r`, `frames x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedFeature {
    pub values: Array2<f64>,
}

/// `[r, m]` per frame, `frames x (D + n_mels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedEmbedding {
    pub values: Array2<f64>,
}

impl FusedEmbedding {
    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

pub fn weighted_sum(stack: &SslFeatureStack, weights: &LayerWeights) -> Result<AggregatedFeature> {
    if weights.logits.len() != stack.n_layers() {
        return Err(Error::invalid(format!(
            "{} layer logits for a {}-layer stack",
            weights.logits.len(),
            stack.n_layers()
        )));
    }
    let mut values = Array2::zeros((stack.n_frames(), stack.dim()));
    for (alpha, layer) in weights.weights().iter().zip(stack.layers.outer_iter()) {
        values.scaled_add(*alpha, &layer);
    }
    Ok(AggregatedFeature { values })
}

/// Frame-count differences up to this many frames are resolved by truncation.
pub const TRUNCATE_TOLERANCE: usize = 2;

/// Brings `r` onto a grid of `target_frames`. Near-equal lengths are
/// truncated to the shorter one (the caller truncates the mel side to match);
/// anything else is linearly interpolated along time.
pub fn align_frames(r: &AggregatedFeature, target_frames: usize) -> Result<AggregatedFeature> {
    let frames = r.values.nrows();
    if frames == 0 || target_frames == 0 {
        return Err(Error::invalid("cannot align empty feature sequences"));
    }
    if frames.abs_diff(target_frames) <= TRUNCATE_TOLERANCE {
        let n = frames.min(target_frames);
        return Ok(AggregatedFeature {
            values: r.values.slice(s![..n, ..]).to_owned(),
        });
    }
    let step = frames as f64 / target_frames as f64;
    let mut values = Array2::zeros((target_frames, r.values.ncols()));
    for t in 0..target_frames {
        let pos = (t as f64 * step).min((frames - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(frames - 1);
        let frac = pos - lo as f64;
        let mut row = values.row_mut(t);
        row.scaled_add(1.0 - frac, &r.values.row(lo));
        row.scaled_add(frac, &r.values.row(hi));
    }
    Ok(AggregatedFeature { values })
}

/// Applies [`align_frames`] to every layer of a stack. Because the weighted
/// sum and the alignment are both linear in time, aligning layers first and
/// summing afterwards gives the same `r` as summing first.
pub fn align_stack(stack: &SslFeatureStack, target_frames: usize) -> Result<Array3<f64>> {
    let layers = stack
        .layers
        .outer_iter()
        .map(|layer| {
            align_frames(
                &AggregatedFeature {
                    values: layer.to_owned(),
                },
                target_frames,
            )
            .map(|a| a.values)
        })
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = layers.iter().map(|l| l.view().insert_axis(Axis(0))).collect();
    Ok(concatenate(Axis(0), &views).expect("aligned layers share a shape"))
}

/// Concatenates `r` and `m` along the feature axis. Lengths within
/// [`TRUNCATE_TOLERANCE`] are truncated to the shorter; larger mismatches
/// mean alignment was skipped and are reported as an invariant violation.
pub fn fuse(r: &AggregatedFeature, m: &MelSpectrogram) -> Result<FusedEmbedding> {
    let (rf, mf) = (r.values.nrows(), m.values.nrows());
    if rf.abs_diff(mf) > TRUNCATE_TOLERANCE {
        return Err(Error::Invariant(format!(
            "fusing {rf} SSL frames with {mf} mel frames; align_frames must run first"
        )));
    }
    let n = rf.min(mf);
    let values = concatenate(
        Axis(1),
        &[r.values.slice(s![..n, ..]), m.values.slice(s![..n, ..])],
    )
    .expect("row counts agree after truncation");
    Ok(FusedEmbedding { values })
}

/// Source of multi-layer features for a waveform at the provider's rate.
pub trait FeatureProvider: Send + Sync {
    fn name(&self) -> &str;
    fn required_input_rate_hz(&self) -> u32;
    fn n_layers(&self) -> usize;
    fn dim(&self) -> usize;
    fn frame_rate_hz(&self) -> f64;
    /// `utt_id` lets file-backed providers locate pre-extracted features;
    /// computed providers ignore it.
    fn extract(&self, utt_id: &str, w: &Waveform) -> Result<SslFeatureStack>;
}

/// Resamples `w` to the provider's rate when needed, then extracts.
pub fn extract_resampled(provider: &dyn FeatureProvider, utt_id: &str, w: &Waveform) -> Result<SslFeatureStack> {
    if w.sample_rate_hz() == provider.required_input_rate_hz() {
        provider.extract(utt_id, w)
    } else {
        provider.extract(utt_id, &resample(w, provider.required_input_rate_hz())?)
    }
}

const SYNTHETIC_RATE_HZ: u32 = 16_000;
const SYNTHETIC_BANDS: usize = 64;

/// Deterministic stand-in for a pretrained SSL encoder: a 64-band log
/// filterbank at 50 fps, mapped through one fixed seeded affine map per
/// layer.
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    n_layers: usize,
    dim: usize,
    analyzer: MelAnalyzer,
    /// Per layer: `bands x D` projection and `D` bias.
    maps: Vec<(Array2<f64>, Vec<f64>)>,
}

impl SyntheticProvider {
    pub fn new(seed: u64, n_layers: usize, dim: usize) -> Result<Self> {
        if n_layers == 0 || dim == 0 {
            return Err(Error::invalid("synthetic provider needs L >= 1 and D >= 1"));
        }
        let cfg = AudioConfig {
            sample_rate_hz: SYNTHETIC_RATE_HZ,
            hop: 320,
            n_fft: 1024,
            win_length: 1024,
            n_mels: SYNTHETIC_BANDS,
            fmin: 0.0,
            fmax: 8_000.0,
            ssl_input_rate_hz: SYNTHETIC_RATE_HZ,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj = Normal::new(0.0, 1.0 / (SYNTHETIC_BANDS as f64).sqrt()).expect("valid std");
        let bias = Normal::new(0.0, 0.1).expect("valid std");
        let maps = (0..n_layers)
            .map(|_| {
                let w = Array2::from_shape_fn((SYNTHETIC_BANDS, dim), |_| proj.sample(&mut rng));
                let b = (0..dim).map(|_| bias.sample(&mut rng)).collect();
                (w, b)
            })
            .collect();
        Ok(Self {
            n_layers,
            dim,
            analyzer: MelAnalyzer::new(&cfg)?,
            maps,
        })
    }
}

impl FeatureProvider for SyntheticProvider {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn required_input_rate_hz(&self) -> u32 {
        SYNTHETIC_RATE_HZ
    }

    fn n_layers(&self) -> usize {
        self.n_layers
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn frame_rate_hz(&self) -> f64 {
        self.analyzer.config().frame_rate_hz()
    }

    fn extract(&self, _utt_id: &str, w: &Waveform) -> Result<SslFeatureStack> {
        let fb = self.analyzer.analyze(w)?.values;
        let frames = fb.nrows();
        let mut layers = Array3::zeros((self.n_layers, frames, self.dim));
        for (i, (proj, bias)) in self.maps.iter().enumerate() {
            let mut out = fb.dot(proj) / 10.0;
            for mut row in out.rows_mut() {
                for (v, b) in row.iter_mut().zip(bias) {
                    *v += b;
                }
            }
            layers.slice_mut(s![i, .., ..]).assign(&out);
        }
        SslFeatureStack::new(layers, self.frame_rate_hz(), self.name())
    }
}

/// Reads pre-extracted stacks from `<dir>/<utt_id>.ssl`.
#[derive(Debug, Clone)]
pub struct ExternalProvider {
    dir: PathBuf,
    input_rate_hz: u32,
    n_layers: usize,
    dim: usize,
    frame_rate_hz: f64,
}

impl ExternalProvider {
    pub fn new(dir: impl Into<PathBuf>, input_rate_hz: u32, n_layers: usize, dim: usize, frame_rate_hz: f64) -> Self {
        Self {
            dir: dir.into(),
            input_rate_hz,
            n_layers,
            dim,
            frame_rate_hz,
        }
    }

    pub fn path_for(&self, utt_id: &str) -> PathBuf {
        self.dir.join(format!("{utt_id}.ssl"))
    }
}

impl FeatureProvider for ExternalProvider {
    fn name(&self) -> &str {
        "external"
    }

    fn required_input_rate_hz(&self) -> u32 {
        self.input_rate_hz
    }

    fn n_layers(&self) -> usize {
        self.n_layers
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    fn extract(&self, utt_id: &str, _w: &Waveform) -> Result<SslFeatureStack> {
        let path = self.path_for(utt_id);
        let stack = read_feature_file(&path, self.name())?;
        if stack.n_layers() != self.n_layers || stack.dim() != self.dim {
            return Err(Error::Format(format!(
                "{}: stack is {}x{}, provider declares L={} D={}",
                path.display(),
                stack.n_layers(),
                stack.dim(),
                self.n_layers,
                self.dim
            )));
        }
        Ok(stack)
    }
}

/// Provider selection by registry name.
#[derive(Debug, Clone, PartialEq)]
pub struct ProviderConfig {
    pub name: String,
    pub seed: u64,
    pub n_layers: usize,
    pub dim: usize,
    /// Directory of `.ssl` files for the external provider.
    pub dir: Option<PathBuf>,
    pub input_rate_hz: u32,
    pub frame_rate_hz: f64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            seed: 1,
            n_layers: 4,
            dim: 8,
            dir: None,
            input_rate_hz: SYNTHETIC_RATE_HZ,
            frame_rate_hz: 50.0,
        }
    }
}

pub fn provider_from_config(cfg: &ProviderConfig) -> Result<Box<dyn FeatureProvider>> {
    match cfg.name.as_str() {
        "synthetic" => Ok(Box::new(SyntheticProvider::new(cfg.seed, cfg.n_layers, cfg.dim)?)),
        "external" => {
            let dir = cfg
                .dir
                .clone()
                .ok_or_else(|| Error::invalid("external provider needs a feature directory"))?;
            Ok(Box::new(ExternalProvider::new(
                dir,
                cfg.input_rate_hz,
                cfg.n_layers,
                cfg.dim,
                cfg.frame_rate_hz,
            )))
        }
        other => Err(Error::invalid(format!(
            "unknown feature provider {other:?} (expected \"synthetic\" or \"external\")"
        ))),
    }
}

/// Little-endian layout: `u32 L, u32 frames, u32 D, f32 frame_rate`, then
/// `L * frames * D` row-major `f32` values.
pub fn write_feature_file(path: impl AsRef<Path>, layers: &Array3<f64>, frame_rate_hz: f64) -> Result<()> {
    let path = path.as_ref();
    let (l, f, d) = layers.dim();
    let mut bytes = Vec::with_capacity(16 + 4 * layers.len());
    for v in [l, f, d] {
        let v = u32::try_from(v).map_err(|_| Error::invalid("feature dimension exceeds u32"))?;
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.extend_from_slice(&(frame_rate_hz as f32).to_le_bytes());
    for v in layers.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::file(path, e))
}

pub fn read_feature_file(path: impl AsRef<Path>, provider_name: &str) -> Result<SslFeatureStack> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::file(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::Format(format!("{}: truncated header", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    let (l, f, d) = (word(0) as usize, word(1) as usize, word(2) as usize);
    let frame_rate = f32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as f64;
    let expected = l
        .checked_mul(f)
        .and_then(|n| n.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(16))
        .ok_or_else(|| Error::Format(format!("{}: header overflows", path.display())))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{}: header declares {l}x{f}x{d} but body has {} bytes",
            path.display(),
            bytes.len() - 16
        )));
    }
    let values: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let layers = Array3::from_shape_vec((l, f, d), values).expect("length checked above");
    SslFeatureStack::new(layers, frame_rate, provider_name)
}
