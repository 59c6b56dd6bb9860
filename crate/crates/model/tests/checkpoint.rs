mod common;

use candle_core::DType;
use common::{toy_config, toy_inputs, trainer};
use svs_model::checkpoint::Checkpoint;
use svs_model::train::Trainer;
use svs_model::Error;

#[test]
fn save_and_load_reproduce_every_parameter_bit_exactly() {
    let cfg = toy_config();
    let mut t = trainer(&cfg, DType::F32);
    let inputs = toy_inputs(&cfg, &[3, 2], 1, DType::F32);
    for _ in 0..2 {
        t.train_step(&inputs).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    let ck = t.checkpoint().unwrap();
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ck);
    assert_eq!(loaded.iteration, 2);

    let r = Trainer::from_checkpoint(&loaded, DType::F32).unwrap();
    let bits = |s: &svs_model::params::ParamStore| {
        s.snapshot()
            .unwrap()
            .into_iter()
            .map(|(k, v)| (k, v.iter().map(|x| (*x as f32).to_bits()).collect::<Vec<_>>()))
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&r.gen_store), bits(&t.gen_store));
    assert_eq!(bits(&r.disc_store), bits(&t.disc_store));
    assert_eq!(r.state, t.state);

    // Saving the reloaded state gives the same bytes.
    assert_eq!(r.checkpoint().unwrap().to_bytes().unwrap(), ck.to_bytes().unwrap());
}

#[test]
fn wrong_magic_is_a_format_error() {
    let cfg = toy_config();
    let t = trainer(&cfg, DType::F32);
    let mut bytes = t.checkpoint().unwrap().to_bytes().unwrap();
    bytes[0] = b'X';
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    std::fs::write(&path, &bytes).unwrap();
    let err = Checkpoint::load(&path).unwrap_err();
    assert!(matches!(err, Error::Format(_)), "{err}");
    assert!(matches!(Checkpoint::load(dir.path().join("missing.ckpt")), Err(Error::File { .. })));
}

#[test]
fn resumed_step_matches_unbroken_run() {
    let cfg = toy_config();
    let inputs = toy_inputs(&cfg, &[4, 3], 2, DType::F32);
    let mut unbroken = trainer(&cfg, DType::F32);
    for _ in 0..3 {
        unbroken.train_step(&inputs).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    unbroken.checkpoint().unwrap().save(&path).unwrap();
    let expected = unbroken.train_step(&inputs).unwrap();

    let mut resumed = Trainer::from_checkpoint(&Checkpoint::load(&path).unwrap(), DType::F32).unwrap();
    let got = resumed.train_step(&inputs).unwrap();
    for ((name, a), (_, b)) in got.terms().iter().zip(expected.terms()) {
        assert!((a - b).abs() <= 1e-6, "{name}: {a} vs {b}");
    }
}

#[test]
fn checkpoint_generator_synthesizes_like_the_trainer() {
    let cfg = toy_config();
    let t = trainer(&cfg, DType::F32);
    let ck = Checkpoint::from_bytes(&t.checkpoint().unwrap().to_bytes().unwrap()).unwrap();
    let (g, _) = ck.generator(DType::F32).unwrap();
    let fs = svs_core::score::FrameScore {
        phoneme_per_frame: vec![1, 1, 2, 3],
        pitch_per_frame: vec![60, 60, 62, -1],
        n_frames: 4,
        event_frames: vec![2, 1, 1],
    };
    let a = g.synthesize_frames(&fs, 1, 5).unwrap();
    let b = t.generator.synthesize_frames(&fs, 1, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 4 * cfg.audio.hop);
}
