//! Objective evaluation: mel-cepstral distortion, log-F0 RMSE, semitone
//! accuracy and speaker-embedding cosine similarity.

use std::f64::consts::{LN_10, PI};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::dsp::{extract_f0, AudioConfig, F0Track, MelAnalyzer, Waveform};
use crate::sslfront::read_feature_file;
use crate::{Error, Result};

/// Cepstral coefficients 1..=13 enter the distance; c0 (overall level) does not.
pub const N_CEPSTRA: usize = 13;

/// `(10 / ln 10) * sqrt(2)`.
pub fn mcd_scale() -> f64 {
    10.0 / LN_10 * 2f64.sqrt()
}

/// Orthonormal DCT-II of each log-mel frame, keeping coefficients 1..=13.
pub fn mel_cepstra(w: &Waveform, analyzer: &MelAnalyzer) -> Result<Array2<f64>> {
    let log_mel = analyzer.analyze(w)?.values;
    let n = log_mel.ncols();
    let basis = Array2::from_shape_fn((n, N_CEPSTRA), |(i, k)| {
        let k = k + 1;
        (2.0 / n as f64).sqrt() * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos()
    });
    Ok(log_mel.dot(&basis))
}

fn euclidean(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Result of aligning two frame sequences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DtwAlignment {
    /// Sum of frame distances along the optimal path.
    pub total_cost: f64,
    pub path_len: usize,
}

impl DtwAlignment {
    pub fn mean_cost(&self) -> f64 {
        self.total_cost / self.path_len as f64
    }
}

/// DTW with Euclidean frame cost and steps (1,1), (1,0), (0,1). Ties prefer
/// the diagonal, then advancing `a`, then advancing `b`. Uses two rolling
/// rows, tracking path length alongside the accumulated cost.
pub fn dtw(a: &Array2<f64>, b: &Array2<f64>) -> Result<DtwAlignment> {
    let (n, m) = (a.nrows(), b.nrows());
    if n == 0 || m == 0 {
        return Err(Error::invalid("DTW needs non-empty sequences"));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::invalid("DTW sequences differ in feature dimension"));
    }
    let mut prev: Vec<(f64, usize)> = vec![(0.0, 0); m];
    let mut cur: Vec<(f64, usize)> = vec![(0.0, 0); m];
    for i in 0..n {
        for j in 0..m {
            let c = euclidean(a.row(i), b.row(j));
            let best = match (i, j) {
                (0, 0) => (0.0, 0),
                (0, _) => cur[j - 1],
                (_, 0) => prev[j],
                _ => {
                    let mut best = prev[j - 1];
                    if prev[j].0 < best.0 {
                        best = prev[j];
                    }
                    if cur[j - 1].0 < best.0 {
                        best = cur[j - 1];
                    }
                    best
                }
            };
            cur[j] = (c + best.0, best.1 + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let (total_cost, path_len) = prev[m - 1];
    Ok(DtwAlignment {
        total_cost,
        path_len,
    })
}

/// Mel-cepstral distortion in dB between DTW-aligned cepstra.
pub fn mcd(reference: &Waveform, synthesized: &Waveform, cfg: &AudioConfig) -> Result<f64> {
    check_rates(reference, synthesized)?;
    for (name, w) in [("reference", reference), ("synthesized", synthesized)] {
        if w.len() < cfg.win_length {
            return Err(Error::invalid(format!(
                "{name} signal has {} samples, shorter than one {}-sample frame",
                w.len(),
                cfg.win_length
            )));
        }
    }
    let analyzer = MelAnalyzer::new(&AudioConfig {
        sample_rate_hz: reference.sample_rate_hz(),
        ..cfg.clone()
    })?;
    let a = mel_cepstra(reference, &analyzer)?;
    let b = mel_cepstra(synthesized, &analyzer)?;
    Ok(mcd_scale() * dtw(&a, &b)?.mean_cost())
}

fn check_rates(a: &Waveform, b: &Waveform) -> Result<()> {
    if a.sample_rate_hz() != b.sample_rate_hz() {
        return Err(Error::invalid(format!(
            "sample rates differ: {} vs {} Hz",
            a.sample_rate_hz(),
            b.sample_rate_hz()
        )));
    }
    Ok(())
}

fn mutually_voiced(reference: &F0Track, synthesized: &F0Track) -> Result<Vec<(f64, f64)>> {
    let pairs: Vec<(f64, f64)> = reference
        .f0_hz
        .iter()
        .zip(&reference.voiced)
        .zip(synthesized.f0_hz.iter().zip(&synthesized.voiced))
        .filter(|((_, &va), (_, &vb))| va && vb)
        .map(|((&fa, _), (&fb, _))| (fa, fb))
        .collect();
    if pairs.is_empty() {
        return Err(Error::NoVoicedOverlap);
    }
    Ok(pairs)
}

/// RMSE of natural-log F0 over frames voiced in both tracks.
pub fn f0_rmse_from_tracks(reference: &F0Track, synthesized: &F0Track) -> Result<f64> {
    let pairs = mutually_voiced(reference, synthesized)?;
    let mse = pairs.iter().map(|(a, b)| (a.ln() - b.ln()).powi(2)).sum::<f64>() / pairs.len() as f64;
    Ok(mse.sqrt())
}

pub fn semitone(f0_hz: f64) -> i64 {
    (69.0 + 12.0 * (f0_hz / 440.0).log2()).round() as i64
}

/// Fraction of mutually voiced frames whose rounded semitone agrees.
pub fn semitone_accuracy_from_tracks(reference: &F0Track, synthesized: &F0Track) -> Result<f64> {
    let pairs = mutually_voiced(reference, synthesized)?;
    let hits = pairs.iter().filter(|(a, b)| semitone(*a) == semitone(*b)).count();
    Ok(hits as f64 / pairs.len() as f64)
}

pub fn f0_rmse(reference: &Waveform, synthesized: &Waveform, cfg: &AudioConfig) -> Result<f64> {
    check_rates(reference, synthesized)?;
    f0_rmse_from_tracks(&extract_f0(reference, cfg), &extract_f0(synthesized, cfg))
}

pub fn semitone_accuracy(reference: &Waveform, synthesized: &Waveform, cfg: &AudioConfig) -> Result<f64> {
    check_rates(reference, synthesized)?;
    semitone_accuracy_from_tracks(&extract_f0(reference, cfg), &extract_f0(synthesized, cfg))
}

/// Maps a waveform to a fixed-dimension speaker vector.
pub trait SpeakerEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, w: &Waveform) -> Result<Vec<f64>>;
}

/// Cosine similarity; fails on a zero-norm vector.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid("embeddings differ in dimension"));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateEmbedding);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn secs(a: &Waveform, b: &Waveform, embedder: &dyn SpeakerEmbedder) -> Result<f64> {
    cosine_similarity(&embedder.embed(a)?, &embedder.embed(b)?)
}

const STATS_BANDS: usize = 32;

/// 64-dim embedding: per-band log-mel means (with the across-band mean
/// removed, so overall gain cancels) followed by per-band standard
/// deviations, unit-normalized.
#[derive(Debug, Clone, Default)]
pub struct MelStatsEmbedder;

impl SpeakerEmbedder for MelStatsEmbedder {
    fn dim(&self) -> usize {
        2 * STATS_BANDS
    }

    fn embed(&self, w: &Waveform) -> Result<Vec<f64>> {
        let base = AudioConfig::default();
        let cfg = AudioConfig {
            sample_rate_hz: w.sample_rate_hz(),
            n_mels: STATS_BANDS,
            fmax: base.fmax.min(w.sample_rate_hz() as f64 / 2.0),
            ..base
        };
        let mel = MelAnalyzer::new(&cfg)?.analyze(w)?.values;
        if mel.nrows() == 0 {
            return Err(Error::DegenerateEmbedding);
        }
        let means = mel.mean_axis(ndarray::Axis(0)).expect("non-empty");
        let stds = mel.std_axis(ndarray::Axis(0), 0.0);
        let centre = means.mean().expect("non-empty");
        let mut v: Vec<f64> = means.iter().map(|m| m - centre).chain(stds.iter().copied()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateEmbedding);
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

/// Pre-computed speaker embeddings stored as `<dir>/<utt_id>.emb` in the
/// feature-file layout with `L = 1`, `frames = 1`.
#[derive(Debug, Clone)]
pub struct ExternalEmbeddings {
    dir: PathBuf,
}

impl ExternalEmbeddings {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn embedding_for(&self, utt_id: &str) -> Result<Vec<f64>> {
        let path = self.dir.join(format!("{utt_id}.emb"));
        let stack = read_feature_file(&path, "external-embedding")?;
        if stack.n_layers() != 1 || stack.n_frames() != 1 {
            return Err(Error::Format(format!("{}: expected a single embedding row", path.display())));
        }
        Ok(stack.layers.iter().copied().collect())
    }
}

/// Metrics for one utterance; `secs` only for multi-speaker corpora.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceMetrics {
    pub utt_id: String,
    pub speaker_id: usize,
    pub mcd_db: f64,
    pub f0_rmse: f64,
    pub st_acc: f64,
    pub secs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceFailure {
    pub utt_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub mcd_db: f64,
    pub f0_rmse: f64,
    pub st_acc: f64,
    pub secs: Option<f64>,
    pub n_utterances: usize,
    pub rows: Vec<UtteranceMetrics>,
    pub failures: Vec<UtteranceFailure>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

impl MetricsReport {
    /// Corpus figures are unweighted means over the successful rows.
    pub fn from_rows(rows: Vec<UtteranceMetrics>, failures: Vec<UtteranceFailure>) -> Self {
        let secs_values: Vec<f64> = rows.iter().filter_map(|r| r.secs).collect();
        Self {
            mcd_db: mean(rows.iter().map(|r| r.mcd_db)),
            f0_rmse: mean(rows.iter().map(|r| r.f0_rmse)),
            st_acc: mean(rows.iter().map(|r| r.st_acc)),
            secs: (!secs_values.is_empty()).then(|| mean(secs_values.into_iter())),
            n_utterances: rows.len(),
            rows,
            failures,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("# f0_rmse_log_base=e\n");
        let _ = writeln!(s, "n_utterances={}", self.n_utterances);
        let _ = writeln!(s, "n_failed={}", self.failures.len());
        let _ = writeln!(s, "mcd_db={:.6}", self.mcd_db);
        let _ = writeln!(s, "f0_rmse={:.6}", self.f0_rmse);
        let _ = writeln!(s, "st_acc={:.6}", self.st_acc);
        if let Some(v) = self.secs {
            let _ = writeln!(s, "secs={v:.6}");
        }
        s.push_str("\nutt_id\tspeaker\tmcd_db\tf0_rmse\tst_acc\tsecs\tstatus\n");
        for r in &self.rows {
            let secs = r.secs.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(
                s,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}\tok",
                r.utt_id, r.speaker_id, r.mcd_db, r.f0_rmse, r.st_acc, secs
            );
        }
        for f in &self.failures {
            let _ = writeln!(s, "{}\t-\t-\t-\t-\t-\tfailed: {}", f.utt_id, f.message.replace(['\t', '\n'], " "));
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::file(path, e))
    }
}
