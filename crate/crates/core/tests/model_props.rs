//! Forecaster properties: instance normalization, shift equivariance, the
//! zero-parameter forecast and whole-model gradient checks.

use gtr_core::engine::gradcheck::check_gradients;
use gtr_core::engine::{EngineError, Graph, Tensor};
use gtr_core::gtr::{FusionKind, GtrConfig};
use gtr_core::model::{revin_denormalize, revin_normalize, ForecastModel, ModelConfig, RevinState};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| scale * rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn config(fusion: Option<FusionKind>, gta: bool, use_revin: bool) -> ModelConfig {
    let (t, n) = (8, 2);
    ModelConfig {
        lookback: t,
        horizon: 3,
        channels: n,
        hidden: 4,
        use_revin,
        revin_eps: 1e-5,
        dropout: 0.0,
        gtr: fusion.map(|fusion| GtrConfig {
            lookback: t,
            channels: n,
            cycle_len: 12,
            period: 2,
            fusion,
            dropout: 0.0,
            gta,
        }),
    }
}

fn randomized(cfg: ModelConfig, seed: u64) -> ForecastModel {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut m = ForecastModel::new(cfg, &mut r).unwrap();
    for p in m.params_mut() {
        let fresh = random(p.shape(), 1.0, &mut r);
        *p = fresh;
    }
    m
}

#[test]
fn zero_parameters_forecast_the_window_mean() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[8, 2], 3.0, &mut r);
    for use_revin in [true, false] {
        let mut m = ForecastModel::new(config(Some(FusionKind::Conv2d), true, use_revin), &mut r).unwrap();
        for p in m.params_mut() {
            *p = Tensor::zeros(p.shape());
        }
        let y = m.forward(&x, 4, false, &mut r).unwrap();
        for c in 0..2 {
            let mean = (0..8).map(|s| x.at(&[s, c])).sum::<f64>() / 8.0;
            let expected = if use_revin { mean } else { 0.0 };
            for s in 0..3 {
                assert!((y.at(&[s, c]) - expected).abs() < 1e-12, "revin={use_revin}");
            }
        }
    }
}

#[test]
fn model_gradients_match_finite_differences() {
    let variants = [
        (None, false),
        (Some(FusionKind::Conv2d), false),
        (Some(FusionKind::Conv2d), true),
        (Some(FusionKind::PointwiseConcat), true),
        (Some(FusionKind::Inception), false),
        (Some(FusionKind::Conv1d), true),
    ];
    let mut restarts = 0;
    for (v, &(fusion, gta)) in variants.iter().enumerate() {
        for k in 0..4u64 {
            let seed = 100 * v as u64 + k;
            let m = randomized(config(fusion, gta, k % 2 == 0), seed);
            let mut r = ChaCha8Rng::seed_from_u64(seed + 7);
            let x = random(&[2, 8, 2], 2.0, &mut r);
            let target = random(&[2, 3, 2], 1.0, &mut r);
            let mut inputs: Vec<Tensor> = m.params().into_iter().cloned().collect();
            inputs.push(x);
            let report = check_gradients(&inputs, 1e-5, |g, vars| {
                let (params, x) = vars.split_at(vars.len() - 1);
                let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
                let y = m
                    .forward_graph(g, params, x[0], &[5, 30], false, &mut no_rng)
                    .map_err(|e| EngineError::Invalid {
                        op: "model",
                        msg: e.to_string(),
                    })?;
                let t = g.constant(target.clone());
                g.mse_loss(y, t)
            })
            .unwrap();
            assert!(
                report.passes(1e-4),
                "{fusion:?} gta={gta} seed={seed}: {} at {:?}",
                report.max_rel_err,
                report.worst
            );
            restarts += 1;
        }
    }
    assert!(restarts >= 20);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn revin_round_trip(
        b in 1usize..4,
        n in 1usize..4,
        t in 2usize..40,
        scale in 1e-3f64..1e3,
        offset in -1e3f64..1e3,
        seed in any::<u64>(),
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut x = random(&[b, n, t], scale, &mut r);
        for v in x.data_mut() {
            *v += offset;
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut state = RevinState::new(1e-5, 2);
        let z = revin_normalize(&mut g, xv, &mut state).unwrap();
        let back = revin_denormalize(&mut g, z, &state).unwrap();
        for (a, e) in g.value(back).data().iter().zip(x.data()) {
            prop_assert!((a - e).abs() < 1e-9 * (1.0 + e.abs()), "{a} vs {e}");
        }
    }

    #[test]
    fn channel_shift_shifts_forecast(
        shift in prop::collection::vec(-50.0f64..50.0, 2),
        fusion in prop::sample::select(vec![None, Some(FusionKind::Conv2d), Some(FusionKind::Inception)]),
        seed in any::<u64>(),
    ) {
        let m = randomized(config(fusion, true, true), seed);
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let x = random(&[8, 2], 1.0, &mut r);
        let mut moved = x.clone();
        for (i, v) in moved.data_mut().iter_mut().enumerate() {
            *v += shift[i % 2];
        }
        let y = m.forward(&x, 2, false, &mut r).unwrap();
        let y_moved = m.forward(&moved, 2, false, &mut r).unwrap();
        for (i, (a, b)) in y_moved.data().iter().zip(y.data()).enumerate() {
            prop_assert!((a - (b + shift[i % 2])).abs() < 1e-9 * (1.0 + a.abs()));
        }
    }
}
