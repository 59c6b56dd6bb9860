//! Corpus evaluation: synthesize every manifest entry from its score and
//! compare against the recorded audio.

use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use svs_core::data::{Manifest, Utterance};
use svs_core::dsp::{resample, Waveform};
use svs_core::metrics::{
    cosine_similarity, f0_rmse, mcd, semitone_accuracy, MetricsReport, SpeakerEmbedder, UtteranceFailure, UtteranceMetrics,
};
use svs_core::score::{parse_score, PhonemeInventory};
use svs_core::sslfront::write_feature_file;
use svs_core::wav::read_wav;

use crate::model::Generator;
use crate::{Error, Result};

/// Report plus one speaker embedding per synthesized utterance.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub embedding_ids: Vec<String>,
    /// `utterances x dim`.
    pub embeddings: Array2<f64>,
}

struct Scored {
    metrics: UtteranceMetrics,
    embedding: Vec<f64>,
}

fn evaluate_one(
    g: &Generator,
    u: &Utterance,
    inventory: &PhonemeInventory,
    seed: u64,
    embedder: &dyn SpeakerEmbedder,
) -> Result<Scored> {
    let (id, speaker) = (u.id.as_str(), u.speaker_id);
    let audio = &g.config().audio;
    let mut reference = read_wav(&u.wav_path)?;
    if reference.sample_rate_hz() != audio.sample_rate_hz {
        reference = resample(&reference, audio.sample_rate_hz)?;
    }
    let text = std::fs::read_to_string(&u.score_path).map_err(|e| Error::file(&u.score_path, e))?;
    let score = parse_score(&text, inventory, id, speaker)?;
    let synthesized: Waveform = g.synthesize(&score, speaker, seed)?;
    let embedding = embedder.embed(&synthesized)?;
    let reference_embedding = embedder.embed(&reference)?;
    Ok(Scored {
        metrics: UtteranceMetrics {
            utt_id: id.to_string(),
            speaker_id: speaker,
            mcd_db: mcd(&reference, &synthesized, audio)?,
            f0_rmse: f0_rmse(&reference, &synthesized, audio)?,
            st_acc: semitone_accuracy(&reference, &synthesized, audio)?,
            secs: Some(cosine_similarity(&reference_embedding, &embedding)?),
        },
        embedding,
    })
}

/// Evaluates every manifest entry. An entry that cannot be read,
/// synthesized or scored is listed as a failure and left out of the corpus
/// averages; the others are still reported.
pub fn evaluate_corpus(
    g: &Generator,
    manifest: &Manifest,
    inventory: &PhonemeInventory,
    seed: u64,
    embedder: &dyn SpeakerEmbedder,
) -> Result<Evaluation> {
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut ids = Vec::new();
    let mut embeddings = Vec::new();
    for u in &manifest.utterances {
        match evaluate_one(g, u, inventory, seed, embedder) {
            Ok(s) => {
                rows.push(s.metrics);
                ids.push(u.id.clone());
                embeddings.push(s.embedding);
            }
            Err(e) => {
                log::warn!("utterance {}: {e}", u.id);
                failures.push(UtteranceFailure {
                    utt_id: u.id.clone(),
                    message: e.to_string(),
                })
            }
        }
    }
    let dim = embedder.dim();
    let flat: Vec<f64> = embeddings.concat();
    let embeddings = Array2::from_shape_vec((ids.len(), dim), flat)
        .map_err(|_| Error::invalid("embedder returned vectors of the wrong dimension"))?;
    Ok(Evaluation {
        report: MetricsReport::from_rows(rows, failures),
        embedding_ids: ids,
        embeddings,
    })
}

/// Writes embeddings in the SSL feature-file layout with one layer (rows are
/// utterances) and the utterance ids, one per line, to `<path>.ids`.
pub fn write_embeddings(path: &Path, ids: &[String], embeddings: &Array2<f64>) -> Result<()> {
    let stack: Array3<f64> = embeddings.clone().insert_axis(Axis(0));
    write_feature_file(path, &stack, 0.0)?;
    let mut ids_path = path.as_os_str().to_owned();
    ids_path.push(".ids");
    let text: String = ids.iter().map(|id| format!("{id}\n")).collect();
    std::fs::write(&ids_path, text).map_err(|e| Error::file(Path::new(&ids_path), e))
}
