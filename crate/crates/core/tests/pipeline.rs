use std::path::Path;

use svs_core::data::{make_synthetic_corpus, Corpus, Manifest};
use svs_core::dsp::{extract_f0, melspectrogram, AudioConfig, Waveform};
use svs_core::metrics::{mcd, secs, MelStatsEmbedder};
use svs_core::score::{length_regulate, midi_to_hz, parse_score, PhonemeInventory, REST};
use svs_core::sslfront::{
    align_frames, extract_resampled, fuse, provider_from_config, read_feature_file, weighted_sum, write_feature_file,
    LayerWeights, ProviderConfig,
};
use svs_core::wav::{read_wav, write_wav};
use svs_core::Error;

fn load(dir: &Path, seed: u64) -> (Manifest, Corpus) {
    let audio = AudioConfig::default();
    let path = make_synthetic_corpus(seed, 4, 2, dir, &audio).unwrap();
    let manifest = Manifest::read(&path).unwrap();
    let text = std::fs::read_to_string(manifest.default_inventory_path()).unwrap();
    let inventory = PhonemeInventory::from_text(&text).unwrap();
    let corpus = Corpus::load(&manifest, &inventory, &audio).unwrap();
    (manifest, corpus)
}

#[test]
fn synthetic_corpus_loads_with_matching_frames() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, corpus) = load(dir.path(), 3);
    let audio = AudioConfig::default();
    assert_eq!(corpus.utterances.len(), 4);
    assert_eq!(corpus.n_speakers(), 2);
    assert_eq!(manifest.n_speakers(), 2);
    for u in &corpus.utterances {
        assert_eq!(u.waveform.sample_rate_hz(), audio.sample_rate_hz);
        let mel = melspectrogram(&u.waveform, &audio).unwrap();
        assert!(mel.n_frames().abs_diff(u.frame_score.n_frames) <= 1, "{}", u.id);
        assert_eq!(u.frame_score.event_frames.iter().sum::<usize>(), u.frame_score.n_frames);
    }
}

#[test]
fn synthetic_corpus_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ma, ca) = load(a.path(), 9);
    let (_, cb) = load(b.path(), 9);
    assert_eq!(ca.utterances.iter().map(|u| &u.waveform).collect::<Vec<_>>(), cb.utterances.iter().map(|u| &u.waveform).collect::<Vec<_>>());
    for u in &ma.utterances {
        let name = u.wav_path.file_name().unwrap();
        assert_eq!(std::fs::read(&u.wav_path).unwrap(), std::fs::read(b.path().join("wavs").join(name)).unwrap());
    }
}

#[test]
fn synthetic_audio_follows_the_score_pitch() {
    let dir = tempfile::tempdir().unwrap();
    let (_, corpus) = load(dir.path(), 5);
    let audio = AudioConfig::default();
    let u = &corpus.utterances[0];
    let f0 = extract_f0(&u.waveform, &audio);
    let mut checked = 0;
    for (t, (&hz, &midi)) in f0.f0_hz.iter().zip(&u.frame_score.pitch_per_frame).enumerate() {
        // Skip frames next to note changes.
        let stable = (t.saturating_sub(2)..(t + 3).min(u.frame_score.n_frames))
            .all(|k| u.frame_score.pitch_per_frame[k] == midi);
        if midi == REST || !stable || hz <= 0.0 {
            continue;
        }
        let cents = 1200.0 * (hz / midi_to_hz(midi)).log2();
        assert!(cents.abs() < 50.0, "frame {t}: {hz} Hz for MIDI {midi}");
        checked += 1;
    }
    assert!(checked > 10);
}

#[test]
fn batches_are_padded_and_masked() {
    let dir = tempfile::tempdir().unwrap();
    let (_, corpus) = load(dir.path(), 4);
    let hop = AudioConfig::default().hop;
    let batches = corpus.batches(3, 1, 0, hop);
    assert_eq!(batches.iter().map(|b| b.len()).sum::<usize>(), 4);
    for b in &batches {
        for i in 0..b.len() {
            let n = b.frame_lengths[i];
            assert_eq!(b.masks[i].iter().sum::<f64>(), n as f64);
            assert!(b.pitches[i][n..].iter().all(|&p| p == REST));
            assert!(b.phonemes[i][n..].iter().all(|&p| p == 0));
            assert_eq!(b.waveform(i).len(), n * hop);
            assert_eq!(b.waveforms[i].len(), b.max_frames * hop);
        }
    }
    assert_eq!(corpus.batch_order(3, 1, 0), corpus.batch_order(3, 1, 0));
}

#[test]
fn missing_audio_names_the_utterance() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, corpus) = load(dir.path(), 6);
    std::fs::remove_file(&manifest.utterances[2].wav_path).unwrap();
    let err = Corpus::load(&manifest, &corpus.inventory, &AudioConfig::default()).unwrap_err();
    assert!(err.to_string().contains(&manifest.utterances[2].id), "{err}");
}

#[test]
fn score_text_round_trips() {
    let inventory = PhonemeInventory::new(["SP", "a", "o"]).unwrap();
    let text = "phoneme\tmidi\tduration\n# intro\na\t60\t0.5\nSP\t-1\t0.24\no\t67\t0.3\n";
    let score = parse_score(text, &inventory, "s1", 1).unwrap();
    assert_eq!(score.events.len(), 3);
    assert!((score.total_duration_sec() - 1.04).abs() < 1e-12);
    let again = parse_score(&score.to_text(&inventory).unwrap(), &inventory, "s1", 1).unwrap();
    assert_eq!(again, score);
    let frames = length_regulate(&score, 50.0).unwrap();
    assert_eq!(frames.n_frames, 52);
    assert_eq!(frames.event_frames, vec![25, 12, 15]);
    assert!(parse_score("x\t60\t0.5\n", &inventory, "s2", 0).is_err());
}

#[test]
fn wav_files_round_trip_at_sixteen_bits() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tone.wav");
    let w = Waveform::sine(440.0, 0.1, 24_000).unwrap().scaled(0.5);
    write_wav(&path, &w).unwrap();
    let back = read_wav(&path).unwrap();
    assert_eq!(back.sample_rate_hz(), 24_000);
    assert_eq!(back.len(), w.len());
    for (a, b) in back.samples().iter().zip(w.samples()) {
        assert!((a - b).abs() <= 1.0 / 32768.0);
    }
    assert!(matches!(read_wav(dir.path().join("none.wav")), Err(Error::File { .. })));
}

#[test]
fn external_features_feed_the_fusion() {
    let dir = tempfile::tempdir().unwrap();
    let audio = AudioConfig::default();
    let w = Waveform::sine(262.0, 1.0, 24_000).unwrap();
    let synthetic = provider_from_config(&ProviderConfig::default()).unwrap();
    let stack = extract_resampled(synthetic.as_ref(), "u", &w).unwrap();
    write_feature_file(dir.path().join("u.ssl"), &stack.layers, stack.frame_rate_hz).unwrap();

    let external = provider_from_config(&ProviderConfig {
        name: "external".into(),
        dir: Some(dir.path().to_path_buf()),
        ..ProviderConfig::default()
    })
    .unwrap();
    let loaded = extract_resampled(external.as_ref(), "u", &w).unwrap();
    assert_eq!(loaded.layers.dim(), stack.layers.dim());
    for (a, b) in loaded.layers.iter().zip(stack.layers.iter()) {
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
    }
    let direct = read_feature_file(dir.path().join("u.ssl"), "file").unwrap();
    assert_eq!(direct.n_layers(), 4);

    let mel = melspectrogram(&w, &audio).unwrap();
    let r = align_frames(&weighted_sum(&loaded, &LayerWeights::uniform(4)).unwrap(), mel.n_frames()).unwrap();
    let e = fuse(&r, &mel).unwrap();
    assert_eq!(e.dim(), 8 + audio.n_mels);
    assert!(external.extract("missing", &w).is_err());
}

#[test]
fn metrics_agree_on_identical_audio() {
    let dir = tempfile::tempdir().unwrap();
    let (_, corpus) = load(dir.path(), 8);
    let audio = AudioConfig::default();
    let (a, b) = (&corpus.utterances[0].waveform, &corpus.utterances[1].waveform);
    assert_eq!(mcd(a, a, &audio).unwrap(), 0.0);
    assert!(mcd(a, b, &audio).unwrap() > 0.0);
    assert!((secs(a, a, &MelStatsEmbedder).unwrap() - 1.0).abs() < 1e-9);
}
