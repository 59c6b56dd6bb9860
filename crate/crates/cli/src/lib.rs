//! Command implementations behind the `svs` binary.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use svs_core::data::{make_synthetic_corpus, write_manifest, Manifest, Utterance};
use svs_core::dsp::resample;
use svs_core::metrics::MelStatsEmbedder;
use svs_core::score::{parse_score, PhonemeInventory};
use svs_core::sslfront::softmax;
use svs_core::wav::{read_wav, write_wav};
use svs_model::checkpoint::Checkpoint;
use svs_model::config::Config;
use svs_model::eval::{evaluate_corpus, write_embeddings};
use svs_model::model::LAYER_LOGITS;
use svs_model::train::run_training;

#[derive(Debug, Parser)]
#[command(name = "svs", version, about = "Singing voice synthesis with SSL-fused posterior features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Resample and validate a corpus into a normalized copy, or generate a synthetic one.
    PrepareData(PrepareArgs),
    /// Train from a manifest; writes per-epoch and final checkpoints plus train.log.
    Train(TrainArgs),
    /// Synthesize a score to a WAV file.
    Synth(SynthArgs),
    /// Objective metrics of a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Print the SSL layer weights of a checkpoint, largest first.
    InspectWeights(InspectArgs),
    /// Resample a WAV file.
    Resample(ResampleArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Source manifest (ignored with --synthetic).
    #[arg(long, required_unless_present = "synthetic")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Phoneme inventory; defaults to phonemes.txt next to the manifest.
    #[arg(long)]
    pub inventory: Option<PathBuf>,
    /// Config whose audio settings define the target sample rate.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Generate the synthetic harmonic-stack corpus instead.
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub n_utts: usize,
    #[arg(long, default_value_t = 2)]
    pub n_speakers: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` config file; the desk preset when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from a named preset (desk or full) instead of a file.
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Continue from a checkpoint; its stored config is used.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub iterations_per_epoch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub segment_frames: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Any config key, e.g. `--set model.latent_dim=16`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub score: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub speaker: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Report path.
    #[arg(long)]
    pub out: PathBuf,
    /// Speaker-embedding dump; `<out>.emb` when omitted.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct ResampleArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub rate: u32,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrepareData(a) => prepare_data(&a),
        Command::Train(a) => train(&a),
        Command::Synth(a) => synth(&a),
        Command::Eval(a) => eval(&a),
        Command::InspectWeights(a) => inspect_weights(&a),
        Command::Resample(a) => resample_file(&a),
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    Ok(match path {
        Some(p) => Config::load(p)?,
        None => Config::desk(),
    })
}

pub fn prepare_data(a: &PrepareArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    if a.synthetic {
        let manifest = make_synthetic_corpus(a.seed, a.n_utts, a.n_speakers, &a.out_dir, &cfg.audio)?;
        println!("{}", manifest.display());
        return Ok(());
    }
    let manifest = Manifest::read(a.manifest.as_ref().expect("clap requires --manifest"))?;
    let inv_path = a.inventory.clone().unwrap_or_else(|| manifest.default_inventory_path());
    let inv_text = std::fs::read_to_string(&inv_path).with_context(|| format!("reading {}", inv_path.display()))?;
    let inventory = PhonemeInventory::from_text(&inv_text)?;

    // Validate everything before writing anything.
    let mut prepared = Vec::with_capacity(manifest.utterances.len());
    for u in &manifest.utterances {
        let named = || format!("utterance {}", u.id);
        let wav = read_wav(&u.wav_path).with_context(named)?;
        let wav = if wav.sample_rate_hz() == cfg.audio.sample_rate_hz {
            wav
        } else {
            resample(&wav, cfg.audio.sample_rate_hz).with_context(named)?
        };
        let text = std::fs::read_to_string(&u.score_path)
            .with_context(|| format!("utterance {}: reading {}", u.id, u.score_path.display()))?;
        let score = parse_score(&text, &inventory, &u.id, u.speaker_id).with_context(named)?;
        prepared.push((u, wav, score.to_text(&inventory)?));
    }

    for sub in ["wavs", "scores"] {
        let dir = a.out_dir.join(sub);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(a.out_dir.join("phonemes.txt"), inventory.to_text())?;
    let mut rows = Vec::with_capacity(prepared.len());
    for (u, wav, score_text) in prepared {
        let wav_path = a.out_dir.join("wavs").join(format!("{}.wav", u.id));
        let score_path = a.out_dir.join("scores").join(format!("{}.txt", u.id));
        write_wav(&wav_path, &wav)?;
        std::fs::write(&score_path, score_text).with_context(|| format!("writing {}", score_path.display()))?;
        rows.push(Utterance {
            id: u.id.clone(),
            wav_path,
            score_path,
            speaker_id: u.speaker_id,
        });
    }
    let out_manifest = a.out_dir.join("manifest.tsv");
    write_manifest(&out_manifest, &rows)?;
    println!("{}", out_manifest.display());
    Ok(())
}

/// Config from file or preset, then flag overrides (flags win).
pub fn train_config(a: &TrainArgs) -> Result<Config> {
    let mut cfg = match (&a.config, &a.preset) {
        (Some(p), _) => Config::load(p)?,
        (None, Some(name)) => Config::preset(name)?,
        (None, None) => Config::desk(),
    };
    for kv in &a.overrides {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("--set expects KEY=VALUE, got {kv:?}");
        };
        cfg.set(k.trim(), v.trim())?;
    }
    let flags = [
        ("train.epochs", a.epochs.map(|v| v.to_string())),
        ("train.iterations_per_epoch", a.iterations_per_epoch.map(|v| v.to_string())),
        ("train.batch_size", a.batch_size.map(|v| v.to_string())),
        ("train.segment_frames", a.segment_frames.map(|v| v.to_string())),
        ("train.seed", a.seed.map(|v| v.to_string())),
        ("train.lr", a.lr.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = train_config(a)?;
    let report = run_training(&cfg, &a.manifest, &a.out_dir, a.resume.as_deref(), &mut |line| println!("{line}"))?;
    eprintln!("final checkpoint: {}", report.final_checkpoint.display());
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let text = std::fs::read_to_string(&a.score).with_context(|| format!("reading {}", a.score.display()))?;
    let id = a.score.file_stem().and_then(|s| s.to_str()).unwrap_or("score");
    let score = parse_score(&text, &ck.inventory, id, a.speaker)?;
    let (generator, _store) = ck.generator(DType::F32)?;
    let wav = generator.synthesize(&score, a.speaker, a.seed)?;
    write_wav(&a.out, &wav)?;
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let manifest = Manifest::read(&a.manifest)?;
    let (generator, _store) = ck.generator(DType::F32)?;
    let result = evaluate_corpus(&generator, &manifest, &ck.inventory, a.seed, &MelStatsEmbedder)?;
    result.report.write(&a.out)?;
    let emb_path = a.embeddings.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".emb");
        PathBuf::from(p)
    });
    write_embeddings(&emb_path, &result.embedding_ids, &result.embeddings)?;
    print!("{}", result.report.to_text());
    let failed = &result.report.failures;
    if !failed.is_empty() {
        for f in failed {
            eprintln!("utterance {} failed: {}", f.utt_id, f.message);
        }
        bail!("{} of {} utterances failed", failed.len(), manifest.utterances.len());
    }
    Ok(())
}

/// `(layer index, weight)` pairs sorted by weight, largest first.
pub fn sorted_layer_weights(ck: &Checkpoint) -> Result<Vec<(usize, f64)>> {
    let blob = ck
        .generator
        .get(LAYER_LOGITS)
        .context("checkpoint has no layer-weight logits")?;
    let logits: Vec<f64> = blob.values.iter().map(|&v| v as f64).collect();
    let mut rows: Vec<(usize, f64)> = softmax(&logits).into_iter().enumerate().collect();
    rows.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(rows)
}

pub fn inspect_weights(a: &InspectArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    for (layer, w) in sorted_layer_weights(&ck)? {
        println!("layer {layer}\t{w:.6}");
    }
    Ok(())
}

pub fn resample_file(a: &ResampleArgs) -> Result<()> {
    let wav = read_wav(&a.input)?;
    write_wav(&a.output, &resample(&wav, a.rate)?)?;
    Ok(())
}
