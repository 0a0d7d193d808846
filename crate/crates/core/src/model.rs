//! MLP forecaster with optional instance normalization and an optional
//! retriever in front of it.
//!
//! Pipeline for a `[T, N]` window: normalize each channel over time,
//! apply the retriever, project time `T → D`, run two GeLU layers with a
//! residual from the projection, dropout, project `D → S`, restore each
//! channel's scale and level. Every time/feature map is shared by all
//! channels.

use rand::Rng;

use crate::engine::{EngineError, Graph, Tensor, Var};
use crate::gtr::{GtrConfig, GtrError, GtrModule};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Gtr(#[from] GtrError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("denormalize called without a cached normalize")]
    MissingRevinStats,
}

pub const DEFAULT_REVIN_EPS: f64 = 1e-5;

/// Per-call instance statistics for one normalize/denormalize pair.
#[derive(Debug, Clone)]
pub struct RevinState {
    pub eps: f64,
    /// Axis of the time dimension in the tensors passed in.
    pub axis: usize,
    stats: Option<(Var, Var)>,
}

impl RevinState {
    pub fn new(eps: f64, axis: usize) -> Self {
        Self { eps, axis, stats: None }
    }

    /// Cached mean and variance nodes, once [`revin_normalize`] has run.
    pub fn stats(&self) -> Option<(Var, Var)> {
        self.stats
    }
}

/// Removes each instance's per-channel mean and variance over the time
/// axis. Statistics stay on the graph, so gradients flow through them.
pub fn revin_normalize(g: &mut Graph, x: Var, state: &mut RevinState) -> Result<Var, ModelError> {
    let mean = g.mean_axis(x, state.axis)?;
    let var = g.var_axis(x, state.axis)?;
    state.stats = Some((mean, var));
    Ok(g.normalize_axis(x, mean, var, state.eps, state.axis)?)
}

pub fn revin_denormalize(g: &mut Graph, y: Var, state: &RevinState) -> Result<Var, ModelError> {
    let (mean, var) = state.stats.ok_or(ModelError::MissingRevinStats)?;
    Ok(g.denormalize_axis(y, mean, var, state.eps, state.axis)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    pub hidden: usize,
    pub use_revin: bool,
    pub revin_eps: f64,
    pub dropout: f64,
    /// Retriever settings; `None` gives the bare MLP.
    pub gtr: Option<GtrConfig>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.lookback == 0 || self.horizon == 0 || self.channels == 0 || self.hidden == 0 {
            return Err(ModelError::Config(format!(
                "lookback {}, horizon {}, channels {} and hidden {} must all be at least 1",
                self.lookback, self.horizon, self.channels, self.hidden
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.revin_eps.is_nan() || self.revin_eps <= 0.0 {
            return Err(ModelError::Config(format!("revin eps {} must be positive", self.revin_eps)));
        }
        if let Some(gc) = &self.gtr {
            gc.validate()?;
            if gc.lookback != self.lookback || gc.channels != self.channels {
                return Err(ModelError::Config(format!(
                    "retriever shape [{}, {}] differs from model [{}, {}]",
                    gc.lookback, gc.channels, self.lookback, self.channels
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastModel {
    config: ModelConfig,
    gtr: Option<GtrModule>,
    w_in: Tensor,
    b_in: Tensor,
    w_mlp1: Tensor,
    b_mlp1: Tensor,
    w_mlp2: Tensor,
    b_mlp2: Tensor,
    w_out: Tensor,
    b_out: Tensor,
}

fn linear_init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> (Tensor, Tensor) {
    let w = crate::gtr::uniform(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng);
    (w, Tensor::zeros(&[fan_out]))
}

/// Closed-form parameter count of the MLP part (everything but the
/// retriever).
pub fn backbone_param_count(lookback: usize, hidden: usize, horizon: usize) -> usize {
    lookback * hidden + hidden + 2 * (hidden * hidden + hidden) + hidden * horizon + horizon
}

impl ForecastModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let gtr = config.gtr.map(|gc| GtrModule::new(gc, rng)).transpose()?;
        let (t, d, s) = (config.lookback, config.hidden, config.horizon);
        let (w_in, b_in) = linear_init(t, d, rng);
        let (w_mlp1, b_mlp1) = linear_init(d, d, rng);
        let (w_mlp2, b_mlp2) = linear_init(d, d, rng);
        let (w_out, b_out) = linear_init(d, s, rng);
        Ok(Self {
            config,
            gtr,
            w_in,
            b_in,
            w_mlp1,
            b_mlp1,
            w_mlp2,
            b_mlp2,
            w_out,
            b_out,
        })
    }

    /// Rebuilds a model from tensors in [`ForecastModel::params`] order.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Self, ModelError> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut model = Self::new(config, &mut rng)?;
        let slots = model.params_mut();
        if slots.len() != params.len() {
            return Err(ModelError::Shape(format!(
                "expected {} parameter tensors, got {}",
                slots.len(),
                params.len()
            )));
        }
        for (slot, p) in slots.into_iter().zip(params) {
            if slot.shape() != p.shape() {
                return Err(ModelError::Shape(format!("parameter {:?} vs stored {:?}", slot.shape(), p.shape())));
            }
            *slot = p;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn gtr(&self) -> Option<&GtrModule> {
        self.gtr.as_ref()
    }

    pub fn gtr_mut(&mut self) -> Option<&mut GtrModule> {
        self.gtr.as_mut()
    }

    /// Parameters in storage order: retriever (if any), input projection,
    /// both MLP layers, output projection; weight before bias.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = self.gtr.as_ref().map(GtrModule::params).unwrap_or_default();
        out.extend([
            &self.w_in,
            &self.b_in,
            &self.w_mlp1,
            &self.b_mlp1,
            &self.w_mlp2,
            &self.b_mlp2,
            &self.w_out,
            &self.b_out,
        ]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.gtr.as_mut().map(GtrModule::params_mut).unwrap_or_default();
        out.extend([
            &mut self.w_in,
            &mut self.b_in,
            &mut self.w_mlp1,
            &mut self.b_mlp1,
            &mut self.w_mlp2,
            &mut self.b_mlp2,
            &mut self.w_out,
            &mut self.b_out,
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Registers every parameter on `g`, trainable or not.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|p| g.leaf(p.clone(), trainable))
            .collect()
    }

    /// Batched forward: `x` is `[B, T, N]`, result `[B, S, N]`.
    pub fn forward_graph<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        vars: &[Var],
        x: Var,
        starts: &[usize],
        training: bool,
        rng: &mut R,
    ) -> Result<Var, ModelError> {
        let c = &self.config;
        let shape = g.shape(x).to_vec();
        match shape.as_slice() {
            &[b, t, n] if t == c.lookback && n == c.channels && b == starts.len() => {}
            _ => {
                return Err(ModelError::Shape(format!(
                    "input {shape:?} with {} starts, expected [B, {}, {}]",
                    starts.len(),
                    c.lookback,
                    c.channels
                )))
            }
        }
        let split = vars.len() - 8;
        let (gtr_vars, mlp) = vars.split_at(split);

        let mut z = g.swap_last2(x)?;
        let mut revin = RevinState::new(c.revin_eps, 2);
        if c.use_revin {
            z = revin_normalize(g, z, &mut revin)?;
        }
        if let Some(gtr) = &self.gtr {
            z = gtr.forward_graph(g, gtr_vars, z, starts, training, rng)?;
        }
        let z = g.linear(z, mlp[0], mlp[1])?;
        let h = g.linear(z, mlp[2], mlp[3])?;
        let h = g.gelu(h)?;
        let h = g.linear(h, mlp[4], mlp[5])?;
        let h = g.gelu(h)?;
        let z_out = g.add(h, z)?;
        let z_out = g.dropout(z_out, c.dropout, training, rng)?;
        let mut y = g.linear(z_out, mlp[6], mlp[7])?;
        if c.use_revin {
            y = revin_denormalize(g, y, &revin)?;
        }
        Ok(g.swap_last2(y)?)
    }

    /// Eval-mode prediction for a `[B, T, N]` batch.
    pub fn predict(&self, inputs: &Tensor, starts: &[usize]) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(inputs.clone());
        let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
        let y = self.forward_graph(&mut g, &vars, x, starts, false, &mut no_rng)?;
        Ok(g.value(y).clone())
    }

    /// Forward for one `[T, N]` window at absolute start `t0`, giving `[S, N]`.
    pub fn forward<R: Rng + ?Sized>(&self, x: &Tensor, t0: usize, training: bool, rng: &mut R) -> Result<Tensor, ModelError> {
        let (t, n) = (self.config.lookback, self.config.channels);
        if x.shape() != [t, n] {
            return Err(ModelError::Shape(format!("input {:?}, expected [{t}, {n}]", x.shape())));
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let xv = g.constant(x.reshaped(&[1, t, n])?);
        let y = self.forward_graph(&mut g, &vars, xv, &[t0], training, rng)?;
        Ok(g.value(y).reshaped(&[self.config.horizon, n])?)
    }
}
