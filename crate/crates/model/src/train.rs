//! End-to-end training: feature preparation, the per-step discriminator and
//! generator updates, scheduling and checkpointing.

use std::collections::{HashMap, VecDeque};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svs_core::data::{Corpus, LoadedUtterance, Manifest};
use svs_core::dsp::{melspectrogram, AudioConfig};
use svs_core::score::PhonemeInventory;
use svs_core::sslfront::{align_stack, extract_resampled, provider_from_config, FeatureProvider};

use crate::checkpoint::{capture_params, restore_params, Checkpoint, OptimizerState};
use crate::config::Config;
use crate::gan::{discriminator_loss, feature_matching, generator_adv_loss, kl_loss, mel_l1, Discriminators, LossBreakdown, LossWeights};
use crate::model::{reparameterize, standard_normal, GaussianParams, Generator, ScoreTensors};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::tensor_dsp::TensorMel;
use crate::{Error, Result};

/// Number of recent steps kept in [`TrainState::history`].
pub const HISTORY_LEN: usize = 1024;

/// Frame-aligned SSL stack and mel-spectrogram of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceFeatures {
    /// `L x frames x D`.
    pub stack: Array3<f64>,
    /// `frames x n_mels`.
    pub mel: Array2<f64>,
}

impl UtteranceFeatures {
    /// Runs the provider on the utterance audio, aligns every layer to the
    /// mel grid and truncates both to the common length.
    pub fn compute(u: &LoadedUtterance, provider: &dyn FeatureProvider, audio: &AudioConfig) -> Result<Self> {
        let mel = melspectrogram(&u.waveform, audio)?;
        let stack = extract_resampled(provider, &u.id, &u.waveform)?;
        let aligned = align_stack(&stack, mel.n_frames())?;
        let frames = aligned.dim().1.min(mel.n_frames());
        Ok(Self {
            stack: aligned.slice(s![.., ..frames, ..]).to_owned(),
            mel: mel.values.slice(s![..frames, ..]).to_owned(),
        })
    }

    pub fn n_frames(&self) -> usize {
        self.mel.nrows()
    }
}

/// A loaded corpus with features for every utterance, computed up front so
/// that unreadable inputs fail before the first step.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub corpus: Corpus,
    pub features: HashMap<String, UtteranceFeatures>,
}

impl TrainingData {
    pub fn new(corpus: Corpus, provider: &dyn FeatureProvider, audio: &AudioConfig) -> Result<Self> {
        let mut features = HashMap::new();
        for u in &corpus.utterances {
            let f = UtteranceFeatures::compute(u, provider, audio)
                .map_err(|e| Error::invalid(format!("utterance {}: {e}", u.id)))?;
            features.insert(u.id.clone(), f);
        }
        Ok(Self { corpus, features })
    }

    /// Reads the manifest, its phoneme inventory and every referenced file.
    pub fn load(manifest_path: &Path, cfg: &Config) -> Result<Self> {
        let manifest = Manifest::read(manifest_path)?;
        let inv_path = manifest.default_inventory_path();
        let inv_text = std::fs::read_to_string(&inv_path).map_err(|e| Error::file(&inv_path, e))?;
        let inventory = PhonemeInventory::from_text(&inv_text)?;
        let corpus = Corpus::load(&manifest, &inventory, &cfg.audio)?;
        let provider = provider_from_config(&cfg.ssl)?;
        Self::new(corpus, provider.as_ref(), &cfg.audio)
    }

    /// Utterance indices of the batch used at global step `iteration`. The
    /// order within an epoch depends only on `(seed, epoch)`.
    pub fn batch_indices(&self, cfg: &Config, iteration: u64) -> Vec<usize> {
        let t = &cfg.train;
        let ipe = t.iterations_per_epoch.max(1) as u64;
        let (epoch, j) = (iteration / ipe, iteration % ipe);
        let n_batches = self.corpus.utterances.len().div_ceil(t.batch_size).max(1) as u64;
        let passes = ipe.div_ceil(n_batches);
        let round = epoch * passes + j / n_batches;
        let order = self.corpus.batch_order(t.batch_size, t.seed, round);
        order[(j % n_batches) as usize].clone()
    }

    pub fn inputs(&self, indices: &[usize], hop: usize, dtype: DType) -> Result<StepInputs> {
        let items: Vec<(&LoadedUtterance, &UtteranceFeatures)> = indices
            .iter()
            .map(|&i| {
                let u = &self.corpus.utterances[i];
                (u, &self.features[&u.id])
            })
            .collect();
        StepInputs::new(&items, hop, dtype)
    }
}

/// Padded tensors for one batch.
#[derive(Debug, Clone)]
pub struct StepInputs {
    pub speakers: Vec<usize>,
    pub lengths: Vec<usize>,
    pub score: ScoreTensors,
    /// Per item, padded to the longest item with rests.
    pub pitches: Vec<Vec<i32>>,
    /// `(B, L, T, D)`, zero padded.
    pub stack: Tensor,
    /// `(B, n_mels, T)`, zero padded.
    pub mel: Tensor,
    /// Per item, exactly `lengths[b] * hop` samples.
    pub waveforms: Vec<Vec<f64>>,
    pub hop: usize,
}

impl StepInputs {
    /// `hop` converts frames to samples.
    pub fn new(items: &[(&LoadedUtterance, &UtteranceFeatures)], hop: usize, dtype: DType) -> Result<Self> {
        if items.is_empty() || hop == 0 {
            return Err(Error::invalid("empty batch or zero hop"));
        }
        let lengths: Vec<usize> = items
            .iter()
            .map(|(u, f)| u.n_frames(hop).min(f.n_frames()))
            .collect();
        let t = lengths.iter().copied().max().unwrap_or(0);
        if t == 0 {
            return Err(Error::invalid("batch has no frames"));
        }
        let (l, _, d) = items[0].1.stack.dim();
        let n_mels = items[0].1.mel.ncols();
        let b = items.len();
        let mut stack = vec![0.0; b * l * t * d];
        let mut mel = vec![0.0; b * n_mels * t];
        let mut phonemes = Vec::with_capacity(b);
        let mut pitches = Vec::with_capacity(b);
        let mut waveforms = Vec::with_capacity(b);
        for (i, ((u, f), &n)) in items.iter().zip(&lengths).enumerate() {
            if f.stack.dim().0 != l || f.stack.dim().2 != d || f.mel.ncols() != n_mels {
                return Err(Error::invalid(format!("utterance {} has mismatched feature shapes", u.id)));
            }
            for li in 0..l {
                for fr in 0..n {
                    let base = ((i * l + li) * t + fr) * d;
                    for k in 0..d {
                        stack[base + k] = f.stack[[li, fr, k]];
                    }
                }
            }
            for k in 0..n_mels {
                for fr in 0..n {
                    mel[(i * n_mels + k) * t + fr] = f.mel[[fr, k]];
                }
            }
            let mut ph = u.frame_score.phoneme_per_frame[..n].to_vec();
            ph.resize(t, 0);
            phonemes.push(ph);
            let mut pi = u.frame_score.pitch_per_frame[..n].to_vec();
            pi.resize(t, svs_core::score::REST);
            pitches.push(pi);
            let samples = u.waveform.samples();
            let mut w = samples[..samples.len().min(n * hop)].to_vec();
            w.resize(n * hop, 0.0);
            waveforms.push(w);
        }
        let dev = Device::Cpu;
        Ok(Self {
            speakers: items.iter().map(|(u, _)| u.speaker_id).collect(),
            score: ScoreTensors::new(&phonemes, &pitches, &lengths, dtype)?,
            lengths,
            pitches,
            stack: Tensor::from_vec(stack, (b, l, t, d), &dev)?.to_dtype(dtype)?,
            mel: Tensor::from_vec(mel, (b, n_mels, t), &dev)?.to_dtype(dtype)?,
            waveforms,
            hop,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.speakers.len()
    }

    pub fn max_frames(&self) -> usize {
        self.lengths.iter().copied().max().unwrap_or(0)
    }
}

/// Random quantities of one step: posterior noise and segment offsets.
#[derive(Debug, Clone)]
pub struct StepDraws {
    /// `(B, latent, T)` standard normal.
    pub noise: Tensor,
    pub starts: Vec<usize>,
    pub segment_frames: usize,
}

impl StepDraws {
    /// Deterministic in `(seed, iteration)`.
    pub fn new(cfg: &Config, inputs: &StepInputs, iteration: u64, dtype: DType) -> Result<Self> {
        let seed = cfg.train.seed ^ (iteration + 1).wrapping_mul(0xD1B5_4A32_D192_ED03);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [inputs.batch_size(), cfg.model.latent_dim, inputs.max_frames()];
        let noise = standard_normal(&mut rng, &shape, dtype)?;
        let shortest = inputs.lengths.iter().copied().min().unwrap_or(0);
        let seg = cfg.train.segment_frames.min(shortest);
        let starts = inputs
            .lengths
            .iter()
            .map(|&n| rng.random_range(0..=n - seg))
            .collect();
        Ok(Self {
            noise,
            starts,
            segment_frames: seg,
        })
    }
}

/// Everything one generator forward pass produces.
#[derive(Debug, Clone)]
pub struct GeneratorForward {
    pub prior: GaussianParams,
    pub posterior: GaussianParams,
    /// `(B, 1, S * hop)` decoder output on the sampled segments.
    pub y_hat: Tensor,
    /// `(B, 1, S * hop)` matching ground-truth segments.
    pub y: Tensor,
}

/// Generator loss terms as tensors, before weighting.
#[derive(Debug, Clone)]
pub struct GeneratorLosses {
    pub kl: Tensor,
    pub mel_l1: Tensor,
    pub adv_g: Option<Tensor>,
    pub feat_match: Option<Tensor>,
    pub total: Tensor,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn check_finite(role: &str, t: &Tensor) -> Result<()> {
    let v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { role: role.to_string() })
    }
}

/// Counters and recent losses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainState {
    /// Completed steps.
    pub iteration: u64,
    /// Completed epochs.
    pub epoch: u64,
    pub history: VecDeque<LossBreakdown>,
}

impl TrainState {
    fn record(&mut self, l: LossBreakdown) {
        if self.history.len() == HISTORY_LEN {
            self.history.pop_front();
        }
        self.history.push_back(l);
    }
}

/// Generator and discriminators with their optimizers.
pub struct Trainer {
    pub cfg: Config,
    pub inventory: PhonemeInventory,
    pub gen_store: ParamStore,
    pub disc_store: ParamStore,
    pub generator: Generator,
    pub discriminators: Discriminators,
    pub gen_opt: AdamW,
    pub disc_opt: AdamW,
    pub state: TrainState,
    mel: TensorMel,
}

impl Trainer {
    pub fn new(cfg: &Config, inventory: PhonemeInventory, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        if inventory.len() != cfg.model.n_phonemes {
            return Err(Error::invalid(format!(
                "inventory has {} phonemes, model.n_phonemes is {}",
                inventory.len(),
                cfg.model.n_phonemes
            )));
        }
        let mut gen_store = ParamStore::new(cfg.train.seed, dtype);
        let generator = Generator::new(cfg, &mut gen_store)?;
        let mut disc_store = ParamStore::new(cfg.train.seed.wrapping_add(1), dtype);
        let discriminators = Discriminators::new(cfg, &mut disc_store)?;
        let t = &cfg.train;
        let opt_cfg = AdamWConfig {
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            weight_decay: t.weight_decay,
        };
        Ok(Self {
            gen_opt: AdamW::new(opt_cfg, &gen_store)?,
            disc_opt: AdamW::new(opt_cfg, &disc_store)?,
            mel: TensorMel::new(&cfg.audio, dtype)?,
            cfg: cfg.clone(),
            inventory,
            gen_store,
            disc_store,
            generator,
            discriminators,
            state: TrainState::default(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType) -> Result<Self> {
        let mut t = Self::new(&ck.config, ck.inventory.clone(), dtype)?;
        restore_params(&ck.generator, &t.gen_store)?;
        restore_params(&ck.discriminators, &t.disc_store)?;
        ck.gen_opt.restore(&mut t.gen_opt, dtype)?;
        ck.disc_opt.restore(&mut t.disc_opt, dtype)?;
        t.state = TrainState {
            iteration: ck.iteration,
            epoch: ck.epoch,
            history: ck.history.iter().copied().collect(),
        };
        Ok(t)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config: self.cfg.clone(),
            inventory: self.inventory.clone(),
            iteration: self.state.iteration,
            epoch: self.state.epoch,
            history: self.state.history.iter().copied().collect(),
            generator: capture_params(&self.gen_store)?,
            discriminators: capture_params(&self.disc_store)?,
            gen_opt: OptimizerState::capture(&self.gen_opt)?,
            disc_opt: OptimizerState::capture(&self.disc_opt)?,
        })
    }

    pub fn dtype(&self) -> DType {
        self.gen_store.dtype()
    }

    /// Learning rate of the step about to run.
    pub fn current_lr(&self) -> f64 {
        let ipe = self.cfg.train.iterations_per_epoch.max(1) as u64;
        self.cfg.train.lr_at_epoch((self.state.iteration / ipe) as usize)
    }

    pub fn draws(&self, inputs: &StepInputs) -> Result<StepDraws> {
        StepDraws::new(&self.cfg, inputs, self.state.iteration, self.dtype())
    }

    /// Prior and posterior over full utterances, decoder on the segments.
    pub fn forward_generator(&self, inputs: &StepInputs, draws: &StepDraws) -> Result<GeneratorForward> {
        let g = &self.generator;
        let prior = g.encode_prior(&inputs.score, &inputs.speakers)?;
        let posterior = g.encode_posterior_from_stack(&inputs.stack, &inputs.mel, &inputs.speakers, &inputs.score.mask)?;
        let z = reparameterize(&posterior, &draws.noise)?;
        let seg = draws.segment_frames;
        let hop = inputs.hop;
        let mut z_seg = Vec::with_capacity(inputs.batch_size());
        let mut pitch_seg = Vec::with_capacity(inputs.batch_size());
        let mut y = Vec::with_capacity(inputs.batch_size() * seg * hop);
        for (b, &start) in draws.starts.iter().enumerate() {
            z_seg.push(z.get(b)?.narrow(1, start, seg)?);
            pitch_seg.push(inputs.pitches[b][start..start + seg].to_vec());
            y.extend_from_slice(&inputs.waveforms[b][start * hop..(start + seg) * hop]);
        }
        let z_seg = Tensor::stack(&z_seg, 0)?;
        let y_hat = g.decode(&z_seg, &inputs.speakers, &pitch_seg)?;
        let y = Tensor::from_vec(y, (inputs.batch_size(), 1, seg * hop), &Device::Cpu)?.to_dtype(self.dtype())?;
        Ok(GeneratorForward {
            prior,
            posterior,
            y_hat,
            y,
        })
    }

    /// Weighted generator objective with the current discriminators.
    pub fn generator_losses(&self, fwd: &GeneratorForward, mask: &Tensor) -> Result<GeneratorLosses> {
        let w = LossWeights::from_config(&self.cfg);
        let kl = kl_loss(&fwd.posterior, &fwd.prior, Some(mask))?;
        let mel = mel_l1(&fwd.y_hat, &fwd.y, &self.mel)?;
        let mut total = ((&kl * w.kl)? + (&mel * w.mel)?)?;
        let (adv_g, fm) = if self.cfg.train.adversarial {
            let real = self.discriminators.forward(&fwd.y)?.detach();
            let fake = self.discriminators.forward(&fwd.y_hat)?;
            let adv_g = generator_adv_loss(&fake)?;
            let fm = feature_matching(&real, &fake)?;
            total = ((total + &adv_g)? + (&fm * w.fm)?)?;
            (Some(adv_g), Some(fm))
        } else {
            (None, None)
        };
        Ok(GeneratorLosses {
            kl,
            mel_l1: mel,
            adv_g,
            feat_match: fm,
            total,
        })
    }

    /// Total generator loss and its breakdown for fixed inputs and draws.
    pub fn generator_objective(&self, inputs: &StepInputs, draws: &StepDraws) -> Result<(Tensor, LossBreakdown)> {
        let fwd = self.forward_generator(inputs, draws)?;
        let l = self.generator_losses(&fwd, &inputs.score.mask)?;
        let opt = |t: &Option<Tensor>| t.as_ref().map(scalar).transpose().map(|v| v.unwrap_or(0.0));
        let breakdown = LossBreakdown {
            kl: scalar(&l.kl)?,
            mel_l1: scalar(&l.mel_l1)?,
            adv_g: opt(&l.adv_g)?,
            feat_match: opt(&l.feat_match)?,
            total_g: scalar(&l.total)?,
            ..Default::default()
        };
        Ok((l.total, breakdown))
    }

    /// One least-squares update of the discriminators on real `y` against a
    /// detached `y_hat`. Returns the pre-update loss.
    pub fn discriminator_update(&mut self, y: &Tensor, y_hat: &Tensor, lr: f64) -> Result<f64> {
        let real = self.discriminators.forward(y)?;
        let fake = self.discriminators.forward(&y_hat.detach())?;
        let loss = discriminator_loss(&real, &fake)?;
        check_finite("loss adv_d", &loss)?;
        let grads = loss.backward()?;
        self.disc_opt.update(&self.disc_store, &grads, lr)?;
        scalar(&loss)
    }

    /// A discriminator-only step on `inputs`; the generator is untouched.
    pub fn discriminator_step(&mut self, inputs: &StepInputs) -> Result<f64> {
        let draws = self.draws(inputs)?;
        let fwd = self.forward_generator(inputs, &draws)?;
        let lr = self.current_lr();
        self.discriminator_update(&fwd.y, &fwd.y_hat, lr)
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, inputs: &StepInputs) -> Result<LossBreakdown> {
        let draws = self.draws(inputs)?;
        let lr = self.current_lr();
        let fwd = self.forward_generator(inputs, &draws)?;
        for (role, t) in [
            ("prior mean", &fwd.prior.mean),
            ("prior log_var", &fwd.prior.log_var),
            ("posterior mean", &fwd.posterior.mean),
            ("posterior log_var", &fwd.posterior.log_var),
            ("decoder output", &fwd.y_hat),
        ] {
            check_finite(role, t)?;
        }
        let adv_d = if self.cfg.train.adversarial {
            self.discriminator_update(&fwd.y, &fwd.y_hat, lr)?
        } else {
            0.0
        };
        let losses = self.generator_losses(&fwd, &inputs.score.mask)?;
        check_finite("loss kl", &losses.kl)?;
        check_finite("loss mel_l1", &losses.mel_l1)?;
        for (role, t) in [("loss adv_g", &losses.adv_g), ("loss feat_match", &losses.feat_match)] {
            if let Some(t) = t {
                check_finite(role, t)?;
            }
        }
        let grads = losses.total.backward()?;
        self.gen_opt.update(&self.gen_store, &grads, lr)?;
        let opt = |t: &Option<Tensor>| t.as_ref().map(scalar).transpose().map(|v| v.unwrap_or(0.0));
        let breakdown = LossBreakdown {
            kl: scalar(&losses.kl)?,
            mel_l1: scalar(&losses.mel_l1)?,
            adv_g: opt(&losses.adv_g)?,
            adv_d,
            feat_match: opt(&losses.feat_match)?,
            total_g: scalar(&losses.total)?,
            total_d: adv_d,
        };
        self.state.iteration += 1;
        self.state.epoch = self.state.iteration / self.cfg.train.iterations_per_epoch.max(1) as u64;
        self.state.record(breakdown);
        Ok(breakdown)
    }

    /// Runs the step scheduled for the current iteration.
    pub fn step(&mut self, data: &TrainingData) -> Result<LossBreakdown> {
        let idx = data.batch_indices(&self.cfg, self.state.iteration);
        let inputs = data.inputs(&idx, self.cfg.audio.hop, self.dtype())?;
        self.train_step(&inputs)
    }

    /// Softmax weights over SSL layers.
    pub fn layer_weights(&self) -> Result<Vec<f64>> {
        Ok(self.generator.layer_weights()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }
}

/// `step=<n> kl=<v> mel=<v> adv_g=<v> adv_d=<v> fm=<v> lr=<v>`
pub fn log_line(step: u64, l: &LossBreakdown, lr: f64) -> String {
    format!(
        "step={step} kl={:.6} mel={:.6} adv_g={:.6} adv_d={:.6} fm={:.6} lr={:.6e}",
        l.kl, l.mel_l1, l.adv_g, l.adv_d, l.feat_match, lr
    )
}

/// Outcome of [`run_training`].
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub final_checkpoint: PathBuf,
    /// Losses of every step run in this call.
    pub losses: Vec<LossBreakdown>,
    pub initial_layer_logits: Vec<f64>,
    pub final_layer_logits: Vec<f64>,
}

/// Fills in inventory and speaker counts from the data.
pub fn fit_config_to_data(cfg: &mut Config, data: &TrainingData) {
    cfg.model.n_phonemes = data.corpus.inventory.len();
    cfg.model.n_speakers = cfg.model.n_speakers.max(data.corpus.n_speakers());
}

/// Trains for the configured schedule, writing `epoch_<k>.ckpt` after every
/// epoch, `final.ckpt` at the end and one log line per step to
/// `train.log` (and to `on_log`). A `resume` checkpoint continues from its
/// iteration counter with its own configuration.
pub fn run_training(
    cfg: &Config,
    manifest: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
    on_log: &mut dyn FnMut(&str),
) -> Result<TrainReport> {
    let mut cfg = cfg.clone();
    let data = TrainingData::load(manifest, &cfg)?;
    fit_config_to_data(&mut cfg, &data);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))?;
    let mut trainer = match resume {
        Some(p) => Trainer::from_checkpoint(&Checkpoint::load(p)?, DType::F32)?,
        None => Trainer::new(&cfg, data.corpus.inventory.clone(), DType::F32)?,
    };
    let log_path = out_dir.join("train.log");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::file(&log_path, e))?;
    let logits = |t: &Trainer| t.gen_store.values(crate::model::LAYER_LOGITS);
    let initial_layer_logits = logits(&trainer)?;
    let ipe = trainer.cfg.train.iterations_per_epoch as u64;
    let total = trainer.cfg.train.epochs as u64 * ipe;
    let mut losses = Vec::new();
    while trainer.state.iteration < total {
        let lr = trainer.current_lr();
        let l = trainer.step(&data)?;
        losses.push(l);
        let line = log_line(trainer.state.iteration, &l, lr);
        writeln!(log, "{line}").map_err(|e| Error::file(&log_path, e))?;
        on_log(&line);
        if trainer.state.iteration % ipe == 0 {
            let path = out_dir.join(format!("epoch_{}.ckpt", trainer.state.iteration / ipe));
            trainer.checkpoint()?.save(&path)?;
        }
    }
    let final_checkpoint = out_dir.join("final.ckpt");
    trainer.checkpoint()?.save(&final_checkpoint)?;
    Ok(TrainReport {
        final_checkpoint,
        losses,
        initial_layer_logits,
        final_layer_logits: logits(&trainer)?,
    })
}
