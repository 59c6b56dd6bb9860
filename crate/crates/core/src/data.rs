//! Corpus manifests, the synthetic desk-scale corpus and deterministic
//! batching.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dsp::{frame_count, AudioConfig, Waveform};
use crate::score::{length_regulate, midi_to_hz, parse_score, FrameScore, MusicScore, PhonemeInventory, ScoreEvent};
use crate::wav::{read_wav, write_wav};
use crate::{Error, Result};

/// One manifest row. Relative paths are resolved against the manifest's
/// directory when the manifest is read.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub wav_path: PathBuf,
    pub score_path: PathBuf,
    pub speaker_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub path: PathBuf,
    pub utterances: Vec<Utterance>,
}

impl Manifest {
    /// `utt_id<TAB>wav_path<TAB>score_path<TAB>speaker_id` per line.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let root = path.parent().unwrap_or(Path::new("."));
        let mut utterances = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("manifest rows need 4 tab-separated fields, found {}", f.len()),
                });
            }
            let speaker_id = f[3].trim().parse().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("speaker id {:?} is not a non-negative integer", f[3]),
            })?;
            utterances.push(Utterance {
                id: f[0].to_string(),
                wav_path: root.join(f[1]),
                score_path: root.join(f[2]),
                speaker_id,
            });
        }
        if utterances.is_empty() {
            return Err(Error::invalid(format!("{}: manifest is empty", path.display())));
        }
        Ok(Self {
            path: path.to_path_buf(),
            utterances,
        })
    }

    pub fn n_speakers(&self) -> usize {
        self.utterances.iter().map(|u| u.speaker_id + 1).max().unwrap_or(0)
    }

    /// Default inventory location: `phonemes.txt` next to the manifest.
    pub fn default_inventory_path(&self) -> PathBuf {
        self.path.parent().unwrap_or(Path::new(".")).join("phonemes.txt")
    }
}

/// Writes rows with paths relative to `dir` where possible.
pub fn write_manifest(path: impl AsRef<Path>, utterances: &[Utterance]) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().unwrap_or(Path::new("."));
    let rel = |p: &Path| p.strip_prefix(dir).unwrap_or(p).display().to_string();
    let mut text = String::new();
    for u in utterances {
        text.push_str(&format!("{}\t{}\t{}\t{}\n", u.id, rel(&u.wav_path), rel(&u.score_path), u.speaker_id));
    }
    std::fs::write(path, text).map_err(|e| Error::file(path, e))
}

/// Phoneme symbols of the synthetic corpus.
pub const SYNTHETIC_PHONEMES: [&str; 6] = ["SP", "a", "i", "u", "e", "o"];

/// Writes `n_utts` utterances of 2-4 notes (MIDI 57-72, 0.2-0.4 s each).
/// Each waveform is a three-partial harmonic stack at the score pitch with
/// partial amplitudes fixed per speaker, plus low Gaussian noise. Note
/// boundaries fall on the same frame grid that [`length_regulate`] produces.
/// Returns the manifest path.
pub fn make_synthetic_corpus(
    seed: u64,
    n_utts: usize,
    n_speakers: usize,
    out_dir: impl AsRef<Path>,
    audio: &AudioConfig,
) -> Result<PathBuf> {
    if n_utts == 0 || n_speakers == 0 {
        return Err(Error::invalid("corpus needs at least one utterance and one speaker"));
    }
    let out_dir = out_dir.as_ref();
    for sub in ["wavs", "scores"] {
        std::fs::create_dir_all(out_dir.join(sub)).map_err(|e| Error::file(out_dir.join(sub), e))?;
    }
    let inventory = PhonemeInventory::new(SYNTHETIC_PHONEMES)?;
    std::fs::write(out_dir.join("phonemes.txt"), inventory.to_text())
        .map_err(|e| Error::file(out_dir.join("phonemes.txt"), e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let partials: Vec<[f64; 3]> = (0..n_speakers)
        .map(|_| [rng.random_range(0.2..1.0), rng.random_range(0.2..1.0), rng.random_range(0.2..1.0)])
        .collect();
    let noise = Normal::new(0.0, 0.002).expect("valid std");
    let sr = audio.sample_rate_hz as f64;

    let mut rows = Vec::with_capacity(n_utts);
    for u in 0..n_utts {
        let id = format!("utt{u:03}");
        let speaker_id = u % n_speakers;
        let n_notes = rng.random_range(2..=4);
        let events: Vec<ScoreEvent> = (0..n_notes)
            .map(|_| ScoreEvent {
                phoneme_id: rng.random_range(1..inventory.len()),
                midi_pitch: rng.random_range(57..=72),
                // Millisecond resolution keeps score files exact.
                duration_sec: (rng.random_range(0.2..0.4f64) * 1000.0).round() / 1000.0,
            })
            .collect();
        let score = MusicScore::new(&id, events, speaker_id)?;
        let fs = length_regulate(&score, audio.frame_rate_hz())?;

        let amps = partials[speaker_id];
        let norm = 0.6 / amps.iter().sum::<f64>();
        let mut phase = 0.0;
        let mut samples = Vec::with_capacity(fs.n_frames * audio.hop);
        for &midi in &fs.pitch_per_frame {
            let f0 = midi_to_hz(midi);
            for _ in 0..audio.hop {
                phase = (phase + 2.0 * PI * f0 / sr) % (2.0 * PI);
                let harmonic: f64 = amps.iter().enumerate().map(|(k, a)| a * ((k + 1) as f64 * phase).sin()).sum();
                samples.push(norm * harmonic + noise.sample(&mut rng));
            }
        }
        let wav_path = out_dir.join("wavs").join(format!("{id}.wav"));
        let score_path = out_dir.join("scores").join(format!("{id}.txt"));
        write_wav(&wav_path, &Waveform::new(samples, audio.sample_rate_hz)?)?;
        std::fs::write(&score_path, score.to_text(&inventory)?).map_err(|e| Error::file(&score_path, e))?;
        rows.push(Utterance {
            id,
            wav_path,
            score_path,
            speaker_id,
        });
    }
    let manifest = out_dir.join("manifest.tsv");
    write_manifest(&manifest, &rows)?;
    Ok(manifest)
}

/// An utterance with its audio and frame-level score in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedUtterance {
    pub id: String,
    pub speaker_id: usize,
    pub score: MusicScore,
    pub frame_score: FrameScore,
    pub waveform: Waveform,
}

impl LoadedUtterance {
    /// Usable frames: the shorter of the score expansion and the audio.
    pub fn n_frames(&self, hop: usize) -> usize {
        self.frame_score.n_frames.min(frame_count(self.waveform.len(), hop))
    }
}

/// Every manifest entry loaded and validated up front.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub utterances: Vec<LoadedUtterance>,
    pub inventory: PhonemeInventory,
}

impl Corpus {
    /// Fails on the first unreadable or invalid entry, naming the utterance.
    pub fn load(manifest: &Manifest, inventory: &PhonemeInventory, audio: &AudioConfig) -> Result<Self> {
        let mut utterances = Vec::with_capacity(manifest.utterances.len());
        for u in &manifest.utterances {
            let named = |e: Error| Error::invalid(format!("utterance {}: {e}", u.id));
            let waveform = read_wav(&u.wav_path).map_err(named)?;
            if waveform.sample_rate_hz() != audio.sample_rate_hz {
                return Err(named(Error::invalid(format!(
                    "audio is {} Hz, expected {} Hz (run prepare-data first)",
                    waveform.sample_rate_hz(),
                    audio.sample_rate_hz
                ))));
            }
            let text = std::fs::read_to_string(&u.score_path).map_err(|e| named(Error::file(&u.score_path, e)))?;
            let score = parse_score(&text, inventory, &u.id, u.speaker_id).map_err(named)?;
            let frame_score = length_regulate(&score, audio.frame_rate_hz()).map_err(named)?;
            utterances.push(LoadedUtterance {
                id: u.id.clone(),
                speaker_id: u.speaker_id,
                score,
                frame_score,
                waveform,
            });
        }
        Ok(Self {
            utterances,
            inventory: inventory.clone(),
        })
    }

    pub fn n_speakers(&self) -> usize {
        self.utterances.iter().map(|u| u.speaker_id + 1).max().unwrap_or(0)
    }

    /// Utterance indices grouped into batches; the shuffle depends only on
    /// `(seed, epoch)`.
    pub fn batch_order(&self, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.utterances.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64, hop: usize) -> Vec<Batch> {
        self.batch_order(batch_size, seed, epoch)
            .iter()
            .map(|idx| Batch::collate(&idx.iter().map(|&i| &self.utterances[i]).collect::<Vec<_>>(), hop))
            .collect()
    }
}

/// Zero-padded batch with per-item lengths and frame masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub speaker_ids: Vec<usize>,
    /// `B x max_frames`, padding is phoneme 0.
    pub phonemes: Vec<Vec<usize>>,
    /// `B x max_frames`, padding is [`crate::score::REST`].
    pub pitches: Vec<Vec<i32>>,
    /// `B x (max_frames * hop)`, zero padded.
    pub waveforms: Vec<Vec<f64>>,
    pub frame_lengths: Vec<usize>,
    /// `B x max_frames`: 1.0 on real frames, 0.0 on padding.
    pub masks: Vec<Vec<f64>>,
    pub max_frames: usize,
    pub hop: usize,
    pub sample_rate_hz: u32,
}

impl Batch {
    pub fn collate(items: &[&LoadedUtterance], hop: usize) -> Self {
        let lengths: Vec<usize> = items.iter().map(|u| u.n_frames(hop)).collect();
        let max_frames = lengths.iter().copied().max().unwrap_or(0);
        let pad = |v: &[usize], n: usize, fill: usize| {
            let mut out = v[..n].to_vec();
            out.resize(max_frames, fill);
            out
        };
        let mut batch = Batch {
            ids: items.iter().map(|u| u.id.clone()).collect(),
            speaker_ids: items.iter().map(|u| u.speaker_id).collect(),
            phonemes: Vec::new(),
            pitches: Vec::new(),
            waveforms: Vec::new(),
            frame_lengths: lengths.clone(),
            masks: Vec::new(),
            max_frames,
            hop,
            sample_rate_hz: items.first().map_or(0, |u| u.waveform.sample_rate_hz()),
        };
        for (u, &n) in items.iter().zip(&lengths) {
            batch.phonemes.push(pad(&u.frame_score.phoneme_per_frame, n, 0));
            let mut p = u.frame_score.pitch_per_frame[..n].to_vec();
            p.resize(max_frames, crate::score::REST);
            batch.pitches.push(p);
            let samples = u.waveform.samples();
            let mut w = samples[..samples.len().min(n * hop)].to_vec();
            w.resize(max_frames * hop, 0.0);
            batch.waveforms.push(w);
            let mut m = vec![1.0; n];
            m.resize(max_frames, 0.0);
            batch.masks.push(m);
        }
        batch
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The unpadded waveform of item `b`.
    pub fn waveform(&self, b: usize) -> Waveform {
        let n = self.frame_lengths[b] * self.hop;
        Waveform::new(self.waveforms[b][..n].to_vec(), self.sample_rate_hz).expect("finite by construction")
    }
}
