//! Mini-batch training with best-validation model selection.

mod adam;
mod checkpoint;
mod config;

use std::time::Instant;

use serde::Serialize;

use crate::data::{DataError, Split, TimeSeriesDataset};
use crate::engine::{EngineError, Graph, Tensor};
use crate::model::{ForecastModel, ModelError};
use crate::rng::{substream, substream_seed, Purpose};

pub use adam::{adam_step, AdamParams, AdamState};
pub use checkpoint::{
    decode, encode, load_checkpoint, save_checkpoint, CheckpointError, CheckpointHeader, HEADER_LEN, MAGIC, VERSION,
};
pub use config::{parse_split, ConfigError, RunConfig, KEYS};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite { epoch: usize, batch: usize, detail: String },
}

impl TrainError {
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::NonFinite { .. } | TrainError::Model(ModelError::Engine(EngineError::NonFinite { .. }))
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were restored; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub best_val_mse: Option<f64>,
    pub test: Metrics,
    pub stopped_early: bool,
    pub wall_time_secs: f64,
}

/// Optional callbacks into the training loop.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Learning rate for a 1-based epoch; `None` keeps the configured rate.
    pub lr_schedule: Option<&'a dyn Fn(usize) -> Option<f64>>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

/// Fresh model for `cfg`, initialized from the run seed's init stream.
pub fn build_model(cfg: &RunConfig, channels: usize) -> Result<ForecastModel, TrainError> {
    let mc = cfg.model_config(channels)?;
    let mut rng = substream(cfg.seed, Purpose::Init, 0);
    Ok(ForecastModel::new(mc, &mut rng)?)
}

/// Eval-mode MSE and MAE over every window of `split`, in standardized units.
pub fn evaluate(
    model: &ForecastModel,
    ds: &TimeSeriesDataset,
    split: Split,
    batch_size: usize,
) -> Result<Metrics, TrainError> {
    let c = model.config();
    let mut sse = 0.0;
    let mut sae = 0.0;
    let mut count = 0usize;
    for batch in ds.make_batches(split, c.lookback, c.horizon, batch_size, None)? {
        let pred = model.predict(&batch.inputs, &batch.start_positions)?;
        for (p, y) in pred.data().iter().zip(batch.targets.data()) {
            let d = p - y;
            sse += d * d;
            sae += d.abs();
        }
        count += pred.len();
    }
    Ok(Metrics {
        mse: sse / count as f64,
        mae: sae / count as f64,
    })
}

/// One optimizer step on a batch; returns the batch loss.
pub fn train_step(
    model: &mut ForecastModel,
    inputs: &Tensor,
    targets: &Tensor,
    starts: &[usize],
    state: &mut AdamState,
    hp: &AdamParams,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<f64, TrainError> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, true);
    let x = g.constant(inputs.clone());
    let y = g.constant(targets.clone());
    let pred = model.forward_graph(&mut g, &vars, x, starts, true, rng)?;
    let loss = g.mse_loss(pred, y).map_err(ModelError::from)?;
    g.backward(loss).map_err(ModelError::from)?;
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(model.params())
        .map(|(&v, p)| g.grad(v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect();
    let value = g.value(loss).item();
    adam_step(&mut model.params_mut(), &grads, state, hp)?;
    Ok(value)
}

pub fn train(model: &mut ForecastModel, ds: &TimeSeriesDataset, cfg: &RunConfig) -> Result<TrainReport, TrainError> {
    train_with(model, ds, cfg, TrainHooks::default())
}

/// Trains for `cfg.epochs`, keeps the weights of the epoch with the lowest
/// validation MSE, and reports test metrics for those weights.
pub fn train_with(
    model: &mut ForecastModel,
    ds: &TimeSeriesDataset,
    cfg: &RunConfig,
    mut hooks: TrainHooks<'_>,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    let started = Instant::now();
    let (t, s) = (cfg.lookback, cfg.horizon);
    let c = model.config();
    if c.lookback != t || c.horizon != s || c.channels != ds.channels() {
        return Err(TrainError::Shape(format!(
            "model is T={} S={} N={}, run is T={t} S={s} N={}",
            c.lookback,
            c.horizon,
            c.channels,
            ds.channels()
        )));
    }
    let mut state = AdamState::for_params(&model.params());
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let lr = hooks.lr_schedule.and_then(|f| f(epoch)).unwrap_or(cfg.lr);
        let hp = AdamParams {
            lr,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        };
        let shuffle = substream_seed(cfg.seed, Purpose::Shuffle, epoch as u64);
        let mut dropout_rng = substream(cfg.seed, Purpose::Dropout, epoch as u64);
        let mut total = 0.0;
        let mut weight = 0usize;
        for (b, batch) in ds.make_batches(Split::Train, t, s, cfg.batch_size, Some(shuffle))?.enumerate() {
            let numeric = |detail: String| TrainError::NonFinite {
                epoch,
                batch: b,
                detail,
            };
            let loss = match train_step(
                model,
                &batch.inputs,
                &batch.targets,
                &batch.start_positions,
                &mut state,
                &hp,
                &mut dropout_rng,
            ) {
                Err(e) if e.is_numeric() => return Err(numeric(e.to_string())),
                other => other?,
            };
            if !loss.is_finite() {
                return Err(numeric(format!("loss {loss}")));
            }
            total += loss * batch.len() as f64;
            weight += batch.len();
        }
        let val = evaluate(model, ds, Split::Val, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: total / weight as f64,
            val,
        };
        if let Some(f) = hooks.on_epoch.as_mut() {
            f(&record);
        }
        records.push(record);
        if best.as_ref().is_none_or(|(_, mse, _)| val.mse < *mse) {
            best = Some((epoch, val.mse, model.params().into_iter().cloned().collect()));
        }
        if let (Some(p), Some((best_epoch, _, _))) = (cfg.patience, &best) {
            if epoch - best_epoch >= p && epoch < cfg.epochs {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_epoch, best_val_mse) = match best {
        Some((e, mse, params)) => {
            for (slot, p) in model.params_mut().into_iter().zip(params) {
                *slot = p;
            }
            (Some(e), Some(mse))
        }
        None => (None, None),
    };
    let test = evaluate(model, ds, Split::Test, cfg.batch_size)?;
    Ok(TrainReport {
        epochs: records,
        best_epoch,
        best_val_mse,
        test,
        stopped_early,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}
