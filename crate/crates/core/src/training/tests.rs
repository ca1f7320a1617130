use super::*;
use crate::dataprep::{preprocess, synth_generate, PreprocessConfig, SynthSpec};
use crate::masking::MaskStrategy;
use rand::Rng;

fn tiny_windows(n_normal: usize, n_anomalous: usize, seed: u64) -> WindowSet {
    let recs = synth_generate(&SynthSpec {
        n_normal,
        n_anomalous,
        segment_len: 8,
        channels: 2,
        rate_hz: 64.0,
        seed,
    })
    .unwrap();
    let mut cfg = PreprocessConfig::new(8, seed);
    cfg.filter = None;
    preprocess(&recs, &cfg).unwrap()
}

fn tiny_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        mask: MaskSpec {
            strategy: MaskStrategy::Geometric,
            ratio: 0.25,
            mean_masked_len: 2.0,
            seed: 1,
        },
        batch_size: 16,
        max_epochs: epochs,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn masked_mse_examples() {
    let x = Tensor::from_fn([8, 3], |i| i as f64 * 0.1);
    let mask: Vec<bool> = (0..24).map(|i| i % 3 == 0).collect();
    assert_eq!(masked_mse(&x, &x, &mask).unwrap(), 0.0);

    let mut y = x.clone();
    y.data_mut()[5] += 2.0;
    let mut one = vec![false; 24];
    one[5] = true;
    assert_eq!(masked_mse(&x, &y, &one).unwrap(), 4.0);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = Tensor::from_fn([8, 3], |_| rng.random_range(-1.0..1.0f64));
    let b = Tensor::from_fn([8, 3], |_| rng.random_range(-1.0..1.0));
    let mask: Vec<bool> = (0..24).map(|_| rng.random_bool(0.4)).collect();
    let mut sum = 0.0;
    let mut count = 0.0;
    for t in 0..8 {
        for m in 0..3 {
            if mask[t * 3 + m] {
                sum += (a.at(&[t, m]) - b.at(&[t, m])).powi(2);
                count += 1.0;
            }
        }
    }
    assert!((masked_mse(&a, &b, &mask).unwrap() - sum / count).abs() < 1e-6);
    assert!(masked_mse(&a, &b, &[false; 24]).is_err());
}

#[test]
fn loss_gradient_vanishes_off_the_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let target = Tensor::from_fn([2, 8, 3], |_| rng.random_range(-1.0..1.0f64));
    let pred = Tensor::from_fn([2, 8, 3], |_| rng.random_range(-1.0..1.0f64));
    let mask: Vec<bool> = (0..48).map(|_| rng.random_bool(0.3)).collect();
    let mut g = Graph::new();
    let p = g.param(pred.clone());
    let loss = g.masked_mse(p, &target, Rc::new(mask.clone())).unwrap();
    assert!((g.value(loss).item() - masked_mse(&target, &pred, &mask).unwrap()).abs() < 1e-12);
    let grads = g.backward(loss).unwrap();
    for (gv, &m) in grads.get(p).unwrap().data().iter().zip(&mask) {
        if !m {
            assert_eq!(*gv, 0.0);
        }
    }
}

#[test]
fn smoke_run_loss_decreases() {
    let ws = tiny_windows(200, 0, 1);
    let (_, report) = train(&ws, &ModelConfig::tiny(), &tiny_train(5)).unwrap();
    let l = &report.train_losses;
    assert_eq!(l.len(), 5);
    assert!(l[0] > l[1] && l[1] > l[2], "{l:?}");
}

#[test]
fn frozen_model_stops_after_patience() {
    let ws = tiny_windows(40, 0, 2);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        patience: 2,
        ..tiny_train(50)
    };
    let (params, report) = train(&ws, &ModelConfig::tiny(), &cfg).unwrap();
    assert_eq!(report.epochs_run(), 3);
    assert!(report.stopped_early);
    assert_eq!(report.best_epoch, 0);
    assert_eq!(params, ModelParams::init(&ModelConfig::tiny()).unwrap());
}

#[test]
fn returns_best_validation_parameters() {
    let ws = tiny_windows(120, 0, 3);
    let cfg = TrainConfig {
        learning_rate: 3e-2,
        ..tiny_train(8)
    };
    let (params, report) = train(&ws, &ModelConfig::tiny(), &cfg).unwrap();
    let min = report.val_losses.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(report.best_val_loss, min);
    assert_eq!(report.val_losses[report.best_epoch], min);
    let data = TrainData::from_windows(&ws).unwrap();
    let again = validation_loss(&params, &data.val, &cfg.mask, Streams::new(&cfg), 64).unwrap();
    assert!((again - min).abs() < 1e-9, "{again} vs {min}");
    assert!(report.val_losses.iter().all(|&v| again <= v + 1e-9));
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let ws = tiny_windows(60, 0, 4);
    let run = |seed| {
        let cfg = TrainConfig { seed, ..tiny_train(2) };
        encode_checkpoint(&train(&ws, &ModelConfig::tiny(), &cfg).unwrap().0).unwrap()
    };
    let a = run(5);
    assert_eq!(a, run(5));
    assert_ne!(a, run(6));
}

#[test]
fn anomalous_training_windows_are_refused() {
    let mut ws = tiny_windows(30, 5, 5);
    assert!(train(&ws, &ModelConfig::tiny(), &tiny_train(1)).is_ok());
    let i = ws.labels.iter().position(|&l| l).unwrap();
    ws.splits[i] = Split::Train;
    let err = train(&ws, &ModelConfig::tiny(), &tiny_train(1)).unwrap_err();
    assert!(err.to_string().contains("anomalous"), "{err}");
}

#[test]
fn config_validation() {
    let bad = [
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { patience: 0, ..TrainConfig::default() },
        TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
        TrainConfig { learning_rate: f64::NAN, ..TrainConfig::default() },
    ];
    for c in bad {
        assert!(c.validate().is_err(), "{c:?}");
    }
    let ws = tiny_windows(20, 0, 6);
    let wrong = ModelConfig { window_len: 16, ..ModelConfig::tiny() };
    assert!(matches!(train(&ws, &wrong, &tiny_train(1)), Err(Error::ConfigMismatch(_))));
}

#[test]
fn diverging_run_aborts() {
    let ws = tiny_windows(40, 0, 7);
    let cfg = TrainConfig {
        learning_rate: 1e30,
        ..tiny_train(3)
    };
    let err = train(&ws, &ModelConfig::tiny(), &cfg).unwrap_err();
    assert!(matches!(err, Error::Training(_)), "{err}");
}

#[test]
fn double_precision_training_runs() {
    let ws = tiny_windows(40, 0, 8);
    let cfg = TrainConfig {
        precision: Precision::F64,
        ..tiny_train(2)
    };
    let (params, report) = train(&ws, &ModelConfig::tiny(), &cfg).unwrap();
    assert_eq!(report.epochs_run(), 2);
    assert!(params.named_tensors().iter().all(|(_, t, _)| t.all_finite()));
}

fn random_params(seed: u64) -> ModelParams<f32> {
    let cfg = ModelConfig { seed, ..ModelConfig::tiny() };
    let mut p = ModelParams::<f32>::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t, _) in p.named_tensors_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-3.0..3.0);
        }
    }
    p
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let p = random_params(1);
    let bytes = save_checkpoint(&p, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.config, p.config);
    for ((n, a, _), (_, b, _)) in p.named_tensors().iter().zip(back.named_tensors()) {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b), "{n}");
    }
    assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
}

#[test]
fn malformed_checkpoints_are_rejected() {
    let bytes = encode_checkpoint(&random_params(2)).unwrap();
    for cut in [0, 3, 5, 9, 40, bytes.len() / 2, bytes.len() - 1] {
        let err = decode_checkpoint(&bytes[..cut]).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert!(offset <= cut as u64),
            other => panic!("cut {cut}: {other}"),
        }
    }
    let mut bad = bytes.clone();
    bad[1] = b'x';
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { offset: 0, .. })));
    let mut bad = bytes.clone();
    bad[4] = 7;
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { offset: 4, .. })));
    let mut long = bytes.clone();
    long.push(0);
    assert!(decode_checkpoint(&long).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cut.ckpt");
    fs::write(&path, &bytes[..100]).unwrap();
    let err = load_checkpoint(&path).unwrap_err();
    assert_eq!(err.category().exit_code(), 2);
    assert!(err.to_string().contains("offset"), "{err}");
}

#[test]
fn config_mismatch_is_explicit() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&random_params(3), &path).unwrap();
    let same_arch = ModelConfig { seed: 99, ..ModelConfig::tiny() };
    assert!(load_checkpoint_expecting(&path, &same_arch).is_ok());
    let other = ModelConfig { heads: 1, d_qk: 8, d_v: 8, ..ModelConfig::tiny() };
    let err = load_checkpoint_expecting(&path, &other).unwrap_err();
    assert!(matches!(err, Error::ConfigMismatch(_)));
    assert!(err.to_string().contains("heads"), "{err}");
}

#[test]
fn manifest_records_hash_and_losses() {
    let dir = tempfile::tempdir().unwrap();
    let ws = tiny_windows(30, 0, 9);
    let cfg = tiny_train(2);
    let (params, report) = train(&ws, &ModelConfig::tiny(), &cfg).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let bytes = save_checkpoint(&params, &ckpt).unwrap();
    let manifest = RunManifest::new(&ModelConfig::tiny(), &cfg, &report, &ckpt, &bytes, Default::default());
    let path = dir.path().join("run.json");
    manifest.save(&path).unwrap();
    let back = RunManifest::load(&path).unwrap();
    assert_eq!(back, manifest);
    assert_eq!(back.checkpoint_sha256, crate::sha256_hex(&fs::read(&ckpt).unwrap()));
    assert_eq!(back.val_losses.len(), 2);
}

use std::fs;
