use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use candle_core::DType;
use clap::Parser;
use svs_cli::{sorted_layer_weights, train_config, Cli, Command as Sub};
use svs_core::data::{make_synthetic_corpus, write_manifest, Manifest, SYNTHETIC_PHONEMES};
use svs_core::dsp::{AudioConfig, Waveform};
use svs_core::score::PhonemeInventory;
use svs_core::wav::{read_wav, write_wav};
use svs_model::checkpoint::Checkpoint;
use svs_model::config::Config;
use svs_model::train::Trainer;

fn svs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svs")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// An untrained desk-sized checkpoint for the synthetic inventory.
fn fresh_checkpoint(dir: &Path) -> PathBuf {
    let mut cfg = Config::desk();
    cfg.model.n_phonemes = SYNTHETIC_PHONEMES.len();
    cfg.model.n_speakers = 2;
    cfg.model.hidden_channels = 16;
    cfg.model.decoder_channels = 16;
    let t = Trainer::new(&cfg, PhonemeInventory::new(SYNTHETIC_PHONEMES).unwrap(), DType::F32).unwrap();
    let path = dir.join("fresh.ckpt");
    t.checkpoint().unwrap().save(&path).unwrap();
    path
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(svs(&[]).status.code(), Some(2));
    assert_eq!(svs(&["dance"]).status.code(), Some(2));
    assert_eq!(svs(&["synth", "--score", "x"]).status.code(), Some(2));
    assert_eq!(svs(&["--help"]).status.code(), Some(0));
}

#[test]
fn prepare_data_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    let out = svs(&["prepare-data", "--synthetic", "--out-dir", p(&raw), "--n-utts", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = raw.join("manifest.tsv");
    assert_eq!(Manifest::read(&manifest).unwrap().utterances.len(), 3);

    let prepared = dir.path().join("prepared");
    let run = || svs(&["prepare-data", "--manifest", p(&manifest), "--out-dir", p(&prepared)]);
    assert!(run().status.success());
    let m = Manifest::read(prepared.join("manifest.tsv")).unwrap();
    assert_eq!(m.utterances.len(), 3);
    let snapshot = || {
        let mut files: Vec<(PathBuf, Vec<u8>)> = Vec::new();
        for sub in ["wavs", "scores"] {
            for e in std::fs::read_dir(prepared.join(sub)).unwrap() {
                let path = e.unwrap().path();
                files.push((path.clone(), std::fs::read(path).unwrap()));
            }
        }
        files.push((prepared.join("manifest.tsv"), std::fs::read(prepared.join("manifest.tsv")).unwrap()));
        files.sort();
        files
    };
    let first = snapshot();
    assert_eq!(first.len(), 7);
    assert!(run().status.success());
    assert_eq!(snapshot(), first);
}

#[test]
fn prepare_data_resamples_foreign_rates() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    make_synthetic_corpus(2, 2, 1, &raw, &AudioConfig::default()).unwrap();
    let m = Manifest::read(raw.join("manifest.tsv")).unwrap();
    let w = read_wav(&m.utterances[0].wav_path).unwrap();
    write_wav(&m.utterances[0].wav_path, &svs_core::dsp::resample(&w, 16_000).unwrap()).unwrap();
    let out_dir = dir.path().join("out");
    let out = svs(&["prepare-data", "--manifest", p(&m.path), "--out-dir", p(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let back = read_wav(out_dir.join("wavs").join(format!("{}.wav", m.utterances[0].id))).unwrap();
    assert_eq!(back.sample_rate_hz(), 24_000);
    assert!(back.len().abs_diff(w.len()) <= 2);
}

#[test]
fn prepare_data_names_a_missing_utterance_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    make_synthetic_corpus(1, 3, 2, &raw, &AudioConfig::default()).unwrap();
    let m = Manifest::read(raw.join("manifest.tsv")).unwrap();
    let mut rows = m.utterances.clone();
    rows[1].wav_path = raw.join("nowhere.wav");
    let broken = raw.join("broken.tsv");
    write_manifest(&broken, &rows).unwrap();
    let out_dir = dir.path().join("out");
    let out = svs(&["prepare-data", "--manifest", p(&broken), "--out-dir", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&rows[1].id));
    assert!(!out_dir.exists());
}

#[test]
fn inspect_weights_of_a_fresh_checkpoint_is_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let ck = fresh_checkpoint(dir.path());
    let out = svs(&["inspect-weights", "--checkpoint", p(&ck)]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.ends_with("\t0.250000")));
    let w = sorted_layer_weights(&Checkpoint::load(&ck).unwrap()).unwrap();
    assert!((w.iter().map(|r| r.1).sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn synth_is_deterministic_and_matches_the_score_length() {
    let dir = tempfile::tempdir().unwrap();
    let ck = fresh_checkpoint(dir.path());
    let score = dir.path().join("song.txt");
    std::fs::write(&score, "phoneme\tmidi\tduration\na\t60\t0.3\nSP\t-1\t0.1\no\t64\t0.42\n").unwrap();
    let run = |out: &str, seed: &str, speaker: &str| {
        svs(&[
            "synth", "--checkpoint", p(&ck), "--score", p(&score), "--speaker", speaker, "--seed", seed, "--out",
            p(&dir.path().join(out)),
        ])
    };
    assert!(run("a.wav", "3", "1").status.success());
    assert!(run("b.wav", "3", "1").status.success());
    let a = std::fs::read(dir.path().join("a.wav")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.wav")).unwrap());
    let w = read_wav(dir.path().join("a.wav")).unwrap();
    let hop_sec = 300.0 / 24_000.0;
    assert!((w.duration_sec() - 0.82).abs() <= hop_sec, "{} s", w.duration_sec());

    let bad = run("c.wav", "3", "7");
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("speaker"));
}

#[test]
fn eval_reports_failures_through_the_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let ck = fresh_checkpoint(dir.path());
    let manifest = make_synthetic_corpus(4, 2, 2, dir.path().join("data"), &AudioConfig::default()).unwrap();
    let report = dir.path().join("report.txt");
    let out = svs(&["eval", "--checkpoint", p(&ck), "--manifest", p(&manifest), "--out", p(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(report.exists());
    assert!(dir.path().join("report.txt.emb").exists());
    assert!(dir.path().join("report.txt.emb.ids").exists());

    let m = Manifest::read(&manifest).unwrap();
    let mut rows = m.utterances.clone();
    rows[0].wav_path = dir.path().join("lost.wav");
    let broken = dir.path().join("broken.tsv");
    write_manifest(&broken, &rows).unwrap();
    let out = svs(&["eval", "--checkpoint", p(&ck), "--manifest", p(&broken), "--out", p(&report)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&rows[0].id));
    assert!(std::fs::read_to_string(&report).unwrap().contains(&rows[0].id));
}

#[test]
fn resample_writes_the_requested_rate() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.wav");
    write_wav(&input, &Waveform::sine(440.0, 0.5, 24_000).unwrap().scaled(0.5)).unwrap();
    let output = dir.path().join("out.wav");
    let out = svs(&["resample", "--input", p(&input), "--output", p(&output), "--rate", "16000"]);
    assert!(out.status.success());
    let w = read_wav(&output).unwrap();
    assert_eq!(w.sample_rate_hz(), 16_000);
    assert_eq!(w.len(), 8_000);
}

#[test]
fn training_flags_override_config_files() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("train.cfg");
    std::fs::write(&file, "train.epochs = 9\ntrain.seed = 4\ntrain.lr = 0.001\n").unwrap();
    let parse = |extra: &[&str]| {
        let mut args = vec!["svs", "train", "--manifest", "m.tsv", "--out-dir", "o", "--config", p(&file)];
        args.extend_from_slice(extra);
        match Cli::try_parse_from(args).unwrap().command {
            Sub::Train(a) => train_config(&a).unwrap(),
            other => panic!("parsed {other:?}"),
        }
    };
    let from_file = parse(&[]);
    assert_eq!((from_file.train.epochs, from_file.train.seed, from_file.train.lr), (9, 4, 0.001));
    let flagged = parse(&["--epochs", "2", "--set", "train.seed=8", "--seed", "5"]);
    assert_eq!((flagged.train.epochs, flagged.train.seed), (2, 5));
    let set_only = parse(&["--set", "model.latent_dim=16"]);
    assert_eq!(set_only.model.latent_dim, 16);
    assert!(Cli::try_parse_from(["svs", "train", "--manifest", "m", "--out-dir", "o", "--config", "a", "--preset", "desk"]).is_err());
}
