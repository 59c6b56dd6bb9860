//! Spectrogram, period and scale discriminators, and every training loss.

use candle_core::{Device, Tensor, D};

use crate::config::Config;
use crate::model::GaussianParams;
use crate::params::{leaky_relu, mean_all, Conv1d, Conv2d, ParamStore};
use crate::tensor_dsp::{TensorMel, TensorStft};
use crate::{Error, Result};

const LEAK: f64 = 0.1;
const MAG_EPS: f64 = 1e-9;

/// Scores and intermediate activations of one or more sub-discriminators.
#[derive(Debug, Clone, Default)]
pub struct DiscriminatorOutput {
    pub scores: Vec<Tensor>,
    pub features: Vec<Vec<Tensor>>,
}

impl DiscriminatorOutput {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn push(&mut self, score: Tensor, features: Vec<Tensor>) {
        self.scores.push(score);
        self.features.push(features);
    }

    fn extend(&mut self, other: DiscriminatorOutput) {
        self.scores.extend(other.scores);
        self.features.extend(other.features);
    }

    /// Same structure with every tensor cut from the graph.
    pub fn detach(&self) -> Self {
        Self {
            scores: self.scores.iter().map(Tensor::detach).collect(),
            features: self
                .features
                .iter()
                .map(|f| f.iter().map(Tensor::detach).collect())
                .collect(),
        }
    }
}

fn check_structure(a: &DiscriminatorOutput, b: &DiscriminatorOutput) -> Result<()> {
    let same = a.len() == b.len()
        && a.scores.iter().zip(&b.scores).all(|(x, y)| x.dims() == y.dims())
        && a.features.iter().zip(&b.features).all(|(fa, fb)| {
            fa.len() == fb.len() && fa.iter().zip(fb).all(|(x, y)| x.dims() == y.dims())
        });
    if same {
        Ok(())
    } else {
        Err(Error::invalid("discriminator outputs have different structure"))
    }
}

fn run_stack<F>(convs: &[F], post: &F, x: Tensor, forward: impl Fn(&F, &Tensor) -> Result<Tensor>) -> Result<(Tensor, Vec<Tensor>)> {
    let mut h = x;
    let mut feats = Vec::with_capacity(convs.len());
    for c in convs {
        h = leaky_relu(&forward(c, &h)?, LEAK)?;
        feats.push(h.clone());
    }
    let score = forward(post, &h)?;
    Ok((score, feats))
}

#[derive(Debug, Clone)]
struct SpecSub {
    stft: TensorStft,
    convs: Vec<Conv2d>,
    post: Conv2d,
}

impl SpecSub {
    fn new(store: &mut ParamStore, name: &str, n_fft: usize, w: usize) -> Result<Self> {
        let c = |s: &mut ParamStore, i: usize, ci, co, st| Conv2d::new(s, &format!("{name}.convs.{i}"), ci, co, 3, st, 1);
        Ok(Self {
            stft: TensorStft::hann(n_fft, n_fft / 4, store.dtype())?,
            convs: vec![
                c(store, 0, 1, w, 2)?,
                c(store, 1, w, 2 * w, 2)?,
                c(store, 2, 2 * w, 2 * w, 2)?,
                c(store, 3, 2 * w, 2 * w, 1)?,
            ],
            post: Conv2d::new(store, &format!("{name}.post"), 2 * w, 1, 3, 1, 1)?,
        })
    }

    fn forward(&self, y: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        // (B, bins, frames) -> (B, 1, frames, bins)
        let mag = self.stft.magnitude(&y.squeeze(1)?, MAG_EPS)?;
        let x = mag.transpose(1, 2)?.unsqueeze(1)?.contiguous()?;
        run_stack(&self.convs, &self.post, x, Conv2d::forward)
    }
}

/// Reflect-pads the end of `(B, 1, N)` to a multiple of `period` and folds
/// it into a `(B, 1, N / period, period)` grid.
pub fn period_grid(y: &Tensor, period: usize) -> Result<Tensor> {
    let (b, _, n) = y.dims3()?;
    let rem = n % period;
    let y = if rem == 0 {
        y.clone()
    } else {
        let pad = period - rem;
        if pad >= n {
            return Err(Error::invalid(format!("{n} samples cannot be folded by period {period}")));
        }
        let idx: Vec<u32> = (0..n + pad)
            .map(|i| if i < n { i as u32 } else { (2 * (n - 1) - i) as u32 })
            .collect();
        y.index_select(&Tensor::from_vec(idx, n + pad, &Device::Cpu)?, 2)?
    };
    let t = y.dim(2)? / period;
    Ok(y.reshape((b, 1, t, period))?)
}

#[derive(Debug, Clone)]
struct PeriodSub {
    period: usize,
    convs: Vec<Conv1d>,
    post: Conv1d,
}

impl PeriodSub {
    fn new(store: &mut ParamStore, name: &str, period: usize, w: usize) -> Result<Self> {
        let c = |s: &mut ParamStore, i: usize, ci, co, st| {
            Conv1d::new(s, &format!("{name}.convs.{i}"), ci, co, 5, st, 1, (2, 2))
        };
        Ok(Self {
            period,
            convs: vec![
                c(store, 0, 1, w, 3)?,
                c(store, 1, w, 2 * w, 3)?,
                c(store, 2, 2 * w, 4 * w, 3)?,
                c(store, 3, 4 * w, 4 * w, 1)?,
            ],
            post: Conv1d::same(store, &format!("{name}.post"), 4 * w, 1, 3, 1)?,
        })
    }

    fn forward(&self, y: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        // A (k, 1) 2-D kernel is a 1-D kernel applied to every column.
        let grid = period_grid(y, self.period)?;
        let (b, _, t, p) = grid.dims4()?;
        let cols = grid.transpose(2, 3)?.contiguous()?.reshape((b * p, 1, t))?;
        run_stack(&self.convs, &self.post, cols, Conv1d::forward)
    }
}

#[derive(Debug, Clone)]
struct ScaleSub {
    pool: usize,
    convs: Vec<Conv1d>,
    post: Conv1d,
}

/// Non-overlapping mean pooling of `(B, 1, N)` by `factor`.
pub fn avg_pool(y: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(y.clone());
    }
    let (b, c, n) = y.dims3()?;
    let t = n / factor;
    Ok(y.narrow(2, 0, t * factor)?.reshape((b, c, t, factor))?.mean(3)?)
}

impl ScaleSub {
    fn new(store: &mut ParamStore, name: &str, pool: usize, w: usize) -> Result<Self> {
        let n = |i: usize| format!("{name}.convs.{i}");
        Ok(Self {
            pool,
            convs: vec![
                Conv1d::same(store, &n(0), 1, w, 15, 1)?,
                Conv1d::new(store, &n(1), w, 2 * w, 21, 4, 1, (10, 10))?,
                Conv1d::new(store, &n(2), 2 * w, 4 * w, 21, 4, 1, (10, 10))?,
                Conv1d::same(store, &n(3), 4 * w, 4 * w, 5, 1)?,
            ],
            post: Conv1d::same(store, &format!("{name}.post"), 4 * w, 1, 3, 1)?,
        })
    }

    fn forward(&self, y: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        run_stack(&self.convs, &self.post, avg_pool(y, self.pool)?, Conv1d::forward)
    }
}

/// The three discriminator families over `(B, 1, N)` waveforms.
#[derive(Debug, Clone)]
pub struct Discriminators {
    mrsd: Vec<SpecSub>,
    mpd: Vec<PeriodSub>,
    msd: Vec<ScaleSub>,
    min_samples: usize,
}

impl Discriminators {
    pub fn new(cfg: &Config, store: &mut ParamStore) -> Result<Self> {
        let d = &cfg.disc;
        let w = d.width;
        Ok(Self {
            mrsd: d
                .mrsd_fft_sizes
                .iter()
                .map(|&n| SpecSub::new(store, &format!("mrsd.{n}"), n, w))
                .collect::<Result<_>>()?,
            mpd: d
                .mpd_periods
                .iter()
                .map(|&p| PeriodSub::new(store, &format!("mpd.{p}"), p, w))
                .collect::<Result<_>>()?,
            msd: (0..d.msd_scales)
                .map(|i| ScaleSub::new(store, &format!("msd.{i}"), 1 << i, w))
                .collect::<Result<_>>()?,
            min_samples: d.mrsd_fft_sizes.iter().copied().max().unwrap_or(1),
        })
    }

    /// Shortest accepted input: one frame at the largest FFT size.
    pub fn min_samples(&self) -> usize {
        self.min_samples
    }

    fn check(&self, y: &Tensor) -> Result<()> {
        let n = y.dims3()?.2;
        if n < self.min_samples {
            return Err(Error::invalid(format!(
                "{n} samples is shorter than one {}-point frame",
                self.min_samples
            )));
        }
        Ok(())
    }

    pub fn mrsd(&self, y: &Tensor) -> Result<DiscriminatorOutput> {
        self.check(y)?;
        let mut out = DiscriminatorOutput::default();
        for d in &self.mrsd {
            let (s, f) = d.forward(y)?;
            out.push(s, f);
        }
        Ok(out)
    }

    pub fn mpd(&self, y: &Tensor) -> Result<DiscriminatorOutput> {
        self.check(y)?;
        let mut out = DiscriminatorOutput::default();
        for d in &self.mpd {
            let (s, f) = d.forward(y)?;
            out.push(s, f);
        }
        Ok(out)
    }

    pub fn msd(&self, y: &Tensor) -> Result<DiscriminatorOutput> {
        self.check(y)?;
        let mut out = DiscriminatorOutput::default();
        for d in &self.msd {
            let (s, f) = d.forward(y)?;
            out.push(s, f);
        }
        Ok(out)
    }

    /// All families, in MRSD, MPD, MSD order.
    pub fn forward(&self, y: &Tensor) -> Result<DiscriminatorOutput> {
        let mut out = self.mrsd(y)?;
        out.extend(self.mpd(y)?);
        out.extend(self.msd(y)?);
        Ok(out)
    }
}

/// Least-squares discriminator loss `sum E[(s_real - 1)^2] + E[s_fake^2]`.
pub fn discriminator_loss(real: &DiscriminatorOutput, fake: &DiscriminatorOutput) -> Result<Tensor> {
    check_structure(real, fake)?;
    let mut terms = Vec::with_capacity(real.len());
    for (r, f) in real.scores.iter().zip(&fake.scores) {
        terms.push((mean_all(&r.affine(1.0, -1.0)?.sqr()?)? + mean_all(&f.sqr()?)?)?);
    }
    Ok(Tensor::stack(&terms, 0)?.sum_all()?)
}

/// Least-squares generator loss `sum E[(s_fake - 1)^2]`.
pub fn generator_adv_loss(fake: &DiscriminatorOutput) -> Result<Tensor> {
    if fake.is_empty() {
        return Err(Error::invalid("no discriminator scores"));
    }
    let terms = fake
        .scores
        .iter()
        .map(|f| mean_all(&f.affine(1.0, -1.0)?.sqr()?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&terms, 0)?.sum_all()?)
}

/// `(adv_d, adv_g)` for one pair of outputs.
pub fn adversarial_losses(real: &DiscriminatorOutput, fake: &DiscriminatorOutput) -> Result<(Tensor, Tensor)> {
    Ok((discriminator_loss(real, fake)?, generator_adv_loss(fake)?))
}

/// Mean over paired feature maps of their mean absolute difference.
pub fn feature_matching(real: &DiscriminatorOutput, fake: &DiscriminatorOutput) -> Result<Tensor> {
    check_structure(real, fake)?;
    let mut terms = Vec::new();
    for (fr, ff) in real.features.iter().zip(&fake.features) {
        for (a, b) in fr.iter().zip(ff) {
            terms.push(mean_all(&(a.detach() - b)?.abs()?)?);
        }
    }
    if terms.is_empty() {
        return Err(Error::invalid("no feature maps to match"));
    }
    Ok(Tensor::stack(&terms, 0)?.mean_all()?)
}

/// `mean |mel(y_hat) - mel(y)|` over `(B, N)` or `(B, 1, N)` waveforms.
pub fn mel_l1(y_hat: &Tensor, y: &Tensor, mel: &TensorMel) -> Result<Tensor> {
    let flat = |t: &Tensor| -> Result<Tensor> {
        Ok(if t.rank() == 3 { t.squeeze(1)? } else { t.clone() })
    };
    let (a, b) = (flat(y_hat)?, flat(y)?);
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!("waveform shapes {:?} and {:?} differ", a.dims(), b.dims())));
    }
    mean_all(&(mel.forward(&a)? - mel.forward(&b)?.detach())?.abs()?)
}

/// Elementwise `KL(q || p)` for diagonal Gaussians given log-variances.
fn kl_elements(q: &GaussianParams, p: &GaussianParams) -> Result<Tensor> {
    if q.mean.dims() != p.mean.dims() || q.log_var.dims() != p.log_var.dims() || q.mean.dims() != q.log_var.dims() {
        return Err(Error::invalid("posterior and prior shapes differ"));
    }
    let var_ratio = (q.log_var.exp()? + (&q.mean - &p.mean)?.sqr()?)?;
    let quad = (var_ratio * p.log_var.neg()?.exp()?)?.affine(0.5, -0.5)?;
    Ok(((&p.log_var - &q.log_var)?.affine(0.5, 0.0)? + quad)?)
}

/// Closed-form `KL(post || prior)`, averaged over frames and latent
/// dimensions. With a `(B, 1, T)` mask each item is averaged over its own
/// real frames and the batch result is the mean over items, so padding never
/// changes the value.
pub fn kl_loss(post: &GaussianParams, prior: &GaussianParams, mask: Option<&Tensor>) -> Result<Tensor> {
    let kl = kl_elements(post, prior)?;
    match mask {
        None => mean_all(&kl),
        Some(mask) => {
            let latent = kl.dim(1)? as f64;
            let per_item = kl.broadcast_mul(mask)?.sum(D::Minus1)?.sum(D::Minus1)?;
            let frames = mask.sum(D::Minus1)?.sum(D::Minus1)?.affine(latent, 0.0)?;
            Ok((per_item / frames)?.mean_all()?)
        }
    }
}

/// Loss weights for the generator objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub kl: f64,
    pub mel: f64,
    pub fm: f64,
}

impl LossWeights {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            kl: cfg.train.lambda_kl,
            mel: cfg.train.lambda_mel,
            fm: cfg.train.lambda_fm,
        }
    }

    /// `kl * lambda_kl + mel * lambda_mel + adv_g + fm * lambda_fm`.
    pub fn total_g(&self, kl: f64, mel_l1: f64, adv_g: f64, fm: f64) -> f64 {
        self.kl * kl + self.mel * mel_l1 + adv_g + self.fm * fm
    }
}

/// Scalar values of every loss term for one training step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub kl: f64,
    pub mel_l1: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub feat_match: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossBreakdown {
    /// Named terms in a fixed order.
    pub fn terms(&self) -> [(&'static str, f64); 7] {
        [
            ("kl", self.kl),
            ("mel_l1", self.mel_l1),
            ("adv_g", self.adv_g),
            ("adv_d", self.adv_d),
            ("feat_match", self.feat_match),
            ("total_g", self.total_g),
            ("total_d", self.total_d),
        ]
    }
}
