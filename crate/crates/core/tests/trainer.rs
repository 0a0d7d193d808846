//! Optimizer trace, training-loop contracts and checkpoint round trips.

use gtr_core::data::{Split, SplitMode, SplitSpec, TimeSeriesDataset};
use gtr_core::engine::Tensor;
use gtr_core::gtr::FusionKind;
use gtr_core::synth::{generate, SynthParams};
use gtr_core::train::{
    adam_step, build_model, decode, encode, evaluate, load_checkpoint, save_checkpoint, train, train_with,
    AdamParams, AdamState, CheckpointError, CheckpointHeader, RunConfig, TrainError, TrainHooks,
};

fn small_config() -> RunConfig {
    RunConfig {
        dataset: "synth".into(),
        split: SplitMode::Fractional { train: 0.7, val: 0.1 },
        lookback: 24,
        horizon: 12,
        cycle_len: 168,
        period: 24,
        hidden: 16,
        lr: 1e-3,
        batch_size: 32,
        epochs: 3,
        use_revin: true,
        dropout: 0.1,
        seed: 5,
        variant: Some(FusionKind::Conv2d),
        ..RunConfig::default()
    }
}

fn dataset(cfg: &RunConfig, length: usize) -> TimeSeriesDataset {
    let p = SynthParams {
        length,
        channels: 2,
        ..SynthParams::default()
    };
    let spec = SplitSpec {
        mode: cfg.split,
        lookback: cfg.lookback,
        horizon: cfg.horizon,
    };
    TimeSeriesDataset::from_values(generate(&p).unwrap(), vec!["a".into(), "b".into()], &spec).unwrap()
}

#[test]
fn adam_matches_scalar_trace_on_square() {
    let hp = AdamParams {
        lr: 0.1,
        ..AdamParams::default()
    };
    let mut theta = Tensor::from_vec(vec![1.0]);
    let mut state = AdamState::new([1]);

    let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for k in 1..=5 {
        let g = 2.0 * theta.data()[0];
        adam_step(&mut [&mut theta], &[vec![g]], &mut state, &hp).unwrap();

        let g_ref = 2.0 * x;
        m = 0.9 * m + 0.1 * g_ref;
        v = 0.999 * v + 0.001 * g_ref * g_ref;
        let m_hat = m / (1.0 - 0.9f64.powi(k));
        let v_hat = v / (1.0 - 0.999f64.powi(k));
        x -= 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((theta.data()[0] - x).abs() < 1e-12, "step {k}: {} vs {x}", theta.data()[0]);
    }
}

#[test]
fn zero_epochs_reports_untrained_test_metrics() {
    let cfg = RunConfig {
        epochs: 0,
        ..small_config()
    };
    let ds = dataset(&cfg, 1500);
    let mut model = build_model(&cfg, 2).unwrap();
    let before = model.clone();
    let report = train(&mut model, &ds, &cfg).unwrap();
    assert!(report.epochs.is_empty());
    assert_eq!(report.best_epoch, None);
    assert_eq!(model, before);
    assert_eq!(report.test, evaluate(&before, &ds, Split::Test, cfg.batch_size).unwrap());
}

#[test]
fn identical_runs_are_bit_identical() {
    let cfg = small_config();
    let ds = dataset(&cfg, 1500);
    let run = || {
        let mut model = build_model(&cfg, 2).unwrap();
        let report = train(&mut model, &ds, &cfg).unwrap();
        let losses: Vec<u64> = report.epochs.iter().map(|r| r.train_loss.to_bits()).collect();
        (losses, report.test.mse.to_bits(), model)
    };
    let (a, ta, ma) = run();
    let (b, tb, mb) = run();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
    assert_eq!(ma, mb);
}

#[test]
fn train_loss_strictly_decreases_on_cycle_data() {
    let cfg = RunConfig {
        epochs: 5,
        ..small_config()
    };
    let ds = dataset(&cfg, 4000);
    let mut model = build_model(&cfg, 2).unwrap();
    let report = train(&mut model, &ds, &cfg).unwrap();
    let losses: Vec<f64> = report.epochs.iter().map(|r| r.train_loss).collect();
    assert_eq!(losses.len(), 5);
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn best_validation_weights_are_restored() {
    let cfg = RunConfig {
        epochs: 4,
        dropout: 0.0,
        ..small_config()
    };
    let ds = dataset(&cfg, 1500);
    let mut model = build_model(&cfg, 2).unwrap();
    let spike = |epoch: usize| (epoch >= 3).then_some(1.0);
    let mut seen = Vec::new();
    let mut on_epoch = |r: &gtr_core::train::EpochRecord| seen.push(r.val.mse);
    let hooks = TrainHooks {
        lr_schedule: Some(&spike),
        on_epoch: Some(&mut on_epoch),
    };
    let report = train_with(&mut model, &ds, &cfg, hooks).unwrap();
    let best = report.best_epoch.unwrap();
    let min = seen.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(seen[best - 1], min);
    assert!(best <= 2, "spiked epochs should not win: {seen:?}");
    let val = evaluate(&model, &ds, Split::Val, cfg.batch_size).unwrap();
    assert_eq!(val.mse, report.best_val_mse.unwrap());
    assert_eq!(report.test, evaluate(&model, &ds, Split::Test, cfg.batch_size).unwrap());
}

#[test]
fn divergence_aborts_with_coordinates() {
    let cfg = RunConfig {
        lr: 1e300,
        epochs: 3,
        ..small_config()
    };
    let ds = dataset(&cfg, 1500);
    let mut model = build_model(&cfg, 2).unwrap();
    let err = train(&mut model, &ds, &cfg).unwrap_err();
    assert!(err.is_numeric(), "{err}");
    match err {
        TrainError::NonFinite { epoch, .. } => assert!(epoch >= 1),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let cfg = small_config();
    let ds = dataset(&cfg, 1500);
    let mut model = build_model(&cfg, 2).unwrap();
    train(&mut model, &ds, &cfg).unwrap();
    let header = CheckpointHeader::of(&model, cfg.cycle_len, cfg.period, cfg.seed);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model, &header).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes, encode(&model, &header));

    let (h2, m2) = load_checkpoint(&path).unwrap();
    assert_eq!(h2, header);
    assert_eq!(m2, model);
    assert_eq!(encode(&m2, &h2), bytes);

    let truncated = &bytes[..bytes.len() - 3];
    assert!(matches!(decode(truncated, &path), Err(CheckpointError::Length { .. })));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode(&bad, &path), Err(CheckpointError::BadMagic { .. })));
}

#[test]
fn bare_backbone_checkpoint_round_trips() {
    let cfg = RunConfig {
        variant: None,
        ..small_config()
    };
    let model = build_model(&cfg, 2).unwrap();
    let header = CheckpointHeader::of(&model, cfg.cycle_len, cfg.period, cfg.seed);
    let bytes = encode(&model, &header);
    let (h2, m2) = decode(&bytes, std::path::Path::new("mem")).unwrap();
    assert_eq!((h2, m2), (header, model));
}
