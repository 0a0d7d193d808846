//! Global temporal retriever.
//!
//! A learnable `L × N` embedding holds one full global cycle per channel.
//! For a window starting at absolute step `t0`, the rows covering the
//! window's positions on the cycle are gathered, passed through a shared
//! `T × T` alignment map, stacked under the window itself and fused by a
//! two-row convolution whose output is added back to the window through
//! dropout. Input and output shapes are identical, so the module can sit in
//! front of any forecaster.
//!
//! With the embedding and the fusion weights at their zero initial values
//! the module is the identity in eval mode.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::engine::{ConvLayout, EngineError, Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GtrError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("cycle length must be at least 1")]
    ZeroCycle,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unknown fusion variant {0:?}")]
    UnknownVariant(String),
}

/// Positions of a window's steps on the global cycle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CycleIndex(Vec<usize>);

impl CycleIndex {
    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }
}

/// `idx[τ] = ((t0 mod L) + τ) mod L` for `τ in 0..lookback`.
pub fn compute_cycle_index(t0: usize, lookback: usize, cycle_len: usize) -> Result<CycleIndex, GtrError> {
    if cycle_len == 0 {
        return Err(GtrError::ZeroCycle);
    }
    let base = t0 % cycle_len;
    Ok(CycleIndex((0..lookback).map(|tau| (base + tau) % cycle_len).collect()))
}

/// Width `1 + 2⌊P/2⌋` of the fusion kernel for dominant period `P`.
pub fn kernel_width(period: usize) -> usize {
    1 + 2 * (period / 2)
}

/// Branch widths of the multi-width fusion: a short, a medium and a full
/// period-sized kernel, all odd.
pub fn inception_widths(period: usize) -> [usize; 3] {
    let half = period / 2;
    let medium = (half | 1).max(3);
    [3, medium, kernel_width(period)]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionKind {
    Conv2d,
    PointwiseConcat,
    Inception,
    Conv1d,
}

impl FusionKind {
    pub const ALL: [FusionKind; 4] = [
        FusionKind::Conv2d,
        FusionKind::PointwiseConcat,
        FusionKind::Inception,
        FusionKind::Conv1d,
    ];

    pub fn tag(self) -> u8 {
        match self {
            FusionKind::Conv2d => 0,
            FusionKind::PointwiseConcat => 1,
            FusionKind::Inception => 2,
            FusionKind::Conv1d => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Conv2d => "conv2d",
            FusionKind::PointwiseConcat => "concat",
            FusionKind::Inception => "inception",
            FusionKind::Conv1d => "conv1d",
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionKind {
    type Err = GtrError;

    fn from_str(s: &str) -> Result<Self, GtrError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "conv2d" | "2d" => Ok(FusionKind::Conv2d),
            "concat" | "pointwise" | "pointwise-concat" => Ok(FusionKind::PointwiseConcat),
            "inception" => Ok(FusionKind::Inception),
            "conv1d" | "1d" => Ok(FusionKind::Conv1d),
            other => Err(GtrError::UnknownVariant(other.to_string())),
        }
    }
}

/// Learnable weights of the local/global fusion.
#[derive(Debug, Clone, PartialEq)]
pub enum Fusion {
    /// Kernel `[2, W]` spanning both rows, bias `[1]`.
    Conv2d { kernel: Tensor, bias: Tensor },
    /// Per-step `2 → 1` affine map: weight `[2, 1]`, bias `[1]`.
    PointwiseConcat { weight: Tensor, bias: Tensor },
    /// Parallel `[2, W_i]` convolutions merged by a `[branches, 1]` map.
    Inception {
        branches: Vec<(Tensor, Tensor)>,
        combine: Tensor,
        combine_bias: Tensor,
    },
    /// Two-channel 1D convolution, kernel `[2, W]`, bias `[1]`.
    Conv1d { kernel: Tensor, bias: Tensor },
}

impl Fusion {
    /// Zero-output initialization for `kind`: every path from the local
    /// row to the output starts at zero and the global row's weights start
    /// random. Since the retrieved rows start at zero too, the module is
    /// the identity, while the embedding still receives gradient.
    ///
    /// Multi-width branches start fully random behind zero merge weights.
    pub fn init<R: Rng + ?Sized>(kind: FusionKind, period: usize, rng: &mut R) -> Self {
        let width = kernel_width(period);
        let global_row_kernel = |rng: &mut R| {
            let mut k = Tensor::zeros(&[2, width]);
            let row = uniform(&[width], 1.0 / ((2 * width) as f64).sqrt(), rng);
            k.data_mut()[width..].copy_from_slice(row.data());
            k
        };
        match kind {
            FusionKind::Conv2d => Fusion::Conv2d {
                kernel: global_row_kernel(rng),
                bias: Tensor::zeros(&[1]),
            },
            FusionKind::Conv1d => Fusion::Conv1d {
                kernel: global_row_kernel(rng),
                bias: Tensor::zeros(&[1]),
            },
            FusionKind::PointwiseConcat => {
                let w = uniform(&[1], 1.0 / 2f64.sqrt(), rng).data()[0];
                Fusion::PointwiseConcat {
                    weight: Tensor::new(&[2, 1], vec![0.0, w]).expect("2x1"),
                    bias: Tensor::zeros(&[1]),
                }
            }
            FusionKind::Inception => {
                let widths = inception_widths(period);
                let branches = widths
                    .iter()
                    .map(|&w| (uniform(&[2, w], 1.0 / ((2 * w) as f64).sqrt(), rng), Tensor::zeros(&[1])))
                    .collect();
                Fusion::Inception {
                    branches,
                    combine: Tensor::zeros(&[widths.len(), 1]),
                    combine_bias: Tensor::zeros(&[1]),
                }
            }
        }
    }

    pub fn kind(&self) -> FusionKind {
        match self {
            Fusion::Conv2d { .. } => FusionKind::Conv2d,
            Fusion::PointwiseConcat { .. } => FusionKind::PointwiseConcat,
            Fusion::Inception { .. } => FusionKind::Inception,
            Fusion::Conv1d { .. } => FusionKind::Conv1d,
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Fusion::Conv2d { kernel, bias } | Fusion::Conv1d { kernel, bias } => vec![kernel, bias],
            Fusion::PointwiseConcat { weight, bias } => vec![weight, bias],
            Fusion::Inception {
                branches,
                combine,
                combine_bias,
            } => {
                let mut out: Vec<&Tensor> = branches.iter().flat_map(|(k, b)| [k, b]).collect();
                out.push(combine);
                out.push(combine_bias);
                out
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Fusion::Conv2d { kernel, bias } | Fusion::Conv1d { kernel, bias } => vec![kernel, bias],
            Fusion::PointwiseConcat { weight, bias } => vec![weight, bias],
            Fusion::Inception {
                branches,
                combine,
                combine_bias,
            } => {
                let mut out: Vec<&mut Tensor> = branches.iter_mut().flat_map(|(k, b)| [k, b]).collect();
                out.push(combine);
                out.push(combine_bias);
                out
            }
        }
    }

    /// Fuses `[M, T]` local and global rows into `[M, T]`. `vars` are this
    /// fusion's parameters bound on `g`, in [`Fusion::params`] order.
    pub(crate) fn apply(&self, g: &mut Graph, vars: &[Var], local: Var, global: Var) -> Result<Var, EngineError> {
        let shape = g.shape(local).to_vec();
        match self {
            Fusion::Conv2d { .. } | Fusion::Conv1d { .. } => {
                let layout = if matches!(self, Fusion::Conv2d { .. }) {
                    ConvLayout::TwoRow
                } else {
                    ConvLayout::OneRow
                };
                let f = g.stack(&[local, global], 1)?;
                g.conv_rows(f, vars[0], vars[1], layout)
            }
            Fusion::PointwiseConcat { .. } => {
                let f = g.stack(&[local, global], 2)?;
                let h = g.linear(f, vars[0], vars[1])?;
                g.reshape(h, &shape)
            }
            Fusion::Inception { branches, .. } => {
                let f = g.stack(&[local, global], 1)?;
                let mut outs = Vec::with_capacity(branches.len());
                for i in 0..branches.len() {
                    outs.push(g.conv_rows(f, vars[2 * i], vars[2 * i + 1], ConvLayout::TwoRow)?);
                }
                let s = g.stack(&outs, 2)?;
                let n = vars.len();
                let h = g.linear(s, vars[n - 2], vars[n - 1])?;
                g.reshape(h, &shape)
            }
        }
    }
}

/// Fuses one channel's window `x` (`[T]`) with its retrieved context `q`.
pub fn fuse(x_channel: &Tensor, q_channel: &Tensor, fusion: &Fusion) -> Result<Tensor, GtrError> {
    if x_channel.rank() != 1 || x_channel.shape() != q_channel.shape() {
        return Err(GtrError::Shape(format!(
            "fuse needs two equal [T] vectors, got {:?} and {:?}",
            x_channel.shape(),
            q_channel.shape()
        )));
    }
    let t = x_channel.len();
    let mut g = Graph::new();
    let x = g.constant(x_channel.reshaped(&[1, t])?);
    let q = g.constant(q_channel.reshaped(&[1, t])?);
    let vars: Vec<Var> = fusion.params().into_iter().map(|p| g.constant(p.clone())).collect();
    let h = fusion.apply(&mut g, &vars, x, q)?;
    Ok(g.value(h).reshaped(&[t])?)
}

/// Softmax-weighted channel aggregate broadcast back to every channel, on a
/// `[B, N, T]` graph value.
pub(crate) fn gta_graph(g: &mut Graph, q_bar: Var) -> Result<Var, EngineError> {
    let channels = g.shape(q_bar)[1];
    let weight = g.softmax_axis(q_bar, 1)?;
    let weighted = g.mul(q_bar, weight)?;
    let token = g.sum_axis(weighted, 1)?;
    g.expand_axis(token, 1, channels)
}

/// Global token aggregation of a `[T, N]` retrieved embedding.
pub fn gta_transform(q_bar: &Tensor) -> Result<Tensor, GtrError> {
    if q_bar.rank() != 2 || q_bar.shape()[1] == 0 {
        return Err(GtrError::Shape(format!("gta needs [T, N>=1], got {:?}", q_bar.shape())));
    }
    let (t, n) = (q_bar.shape()[0], q_bar.shape()[1]);
    let mut g = Graph::new();
    let q = g.constant(q_bar.transpose_last2().reshaped(&[1, n, t])?);
    let out = gta_graph(&mut g, q)?;
    Ok(g.value(out).reshaped(&[n, t])?.transpose_last2())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtrConfig {
    pub lookback: usize,
    pub channels: usize,
    pub cycle_len: usize,
    pub period: usize,
    pub fusion: FusionKind,
    pub dropout: f64,
    pub gta: bool,
}

impl GtrConfig {
    pub fn validate(&self) -> Result<(), GtrError> {
        if self.cycle_len == 0 {
            return Err(GtrError::ZeroCycle);
        }
        if self.lookback == 0 || self.channels == 0 || self.period == 0 {
            return Err(GtrError::Config(format!(
                "lookback {}, channels {} and period {} must all be at least 1",
                self.lookback, self.channels, self.period
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(GtrError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtrModule {
    config: GtrConfig,
    /// Global cycle embedding, `[L, N]`.
    q: Tensor,
    /// Alignment map shared by all channels, `[T, T]` and `[T]`.
    w_align: Tensor,
    b_align: Tensor,
    fusion: Fusion,
}

impl GtrModule {
    pub fn new<R: Rng + ?Sized>(config: GtrConfig, rng: &mut R) -> Result<Self, GtrError> {
        config.validate()?;
        let t = config.lookback;
        Ok(Self {
            q: Tensor::zeros(&[config.cycle_len, config.channels]),
            w_align: uniform(&[t, t], 1.0 / (t as f64).sqrt(), rng),
            b_align: Tensor::zeros(&[t]),
            fusion: Fusion::init(config.fusion, config.period, rng),
            config,
        })
    }

    /// Rebuilds a module from stored parameters in [`GtrModule::params`] order.
    pub fn from_params(config: GtrConfig, params: Vec<Tensor>) -> Result<Self, GtrError> {
        config.validate()?;
        let mut module = Self::new(config, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        let slots = module.params_mut();
        if slots.len() != params.len() {
            return Err(GtrError::Shape(format!(
                "expected {} parameter tensors, got {}",
                slots.len(),
                params.len()
            )));
        }
        for (slot, p) in slots.into_iter().zip(params) {
            if slot.shape() != p.shape() {
                return Err(GtrError::Shape(format!("parameter {:?} vs stored {:?}", slot.shape(), p.shape())));
            }
            *slot = p;
        }
        Ok(module)
    }

    pub fn config(&self) -> &GtrConfig {
        &self.config
    }

    pub fn embedding(&self) -> &Tensor {
        &self.q
    }

    pub fn embedding_mut(&mut self) -> &mut Tensor {
        &mut self.q
    }

    pub fn align(&self) -> (&Tensor, &Tensor) {
        (&self.w_align, &self.b_align)
    }

    pub fn align_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (&mut self.w_align, &mut self.b_align)
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    pub fn fusion_mut(&mut self) -> &mut Fusion {
        &mut self.fusion
    }

    /// Parameters in storage order: embedding, alignment weight and bias,
    /// then the fusion weights.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.q, &self.w_align, &self.b_align];
        out.extend(self.fusion.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.q, &mut self.w_align, &mut self.b_align];
        out.extend(self.fusion.params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Gathered and aligned embedding for a batch of windows, `[B, N, T]`.
    fn retrieve_graph(&self, g: &mut Graph, vars: &[Var], starts: &[usize]) -> Result<Var, GtrError> {
        let indices = starts
            .iter()
            .map(|&t0| compute_cycle_index(t0, self.config.lookback, self.config.cycle_len).map(CycleIndex::into_vec))
            .collect::<Result<Vec<_>, _>>()?;
        let gathered = g.gather_rows(vars[0], &indices)?;
        Ok(g.linear(gathered, vars[1], vars[2])?)
    }

    /// Batched forward on a graph.
    ///
    /// `x` is `[B, N, T]` (channel-major); `vars` are this module's
    /// parameters bound on `g` in [`GtrModule::params`] order.
    pub fn forward_graph<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        vars: &[Var],
        x: Var,
        starts: &[usize],
        training: bool,
        rng: &mut R,
    ) -> Result<Var, GtrError> {
        let shape = g.shape(x).to_vec();
        let (b, n, t) = match shape.as_slice() {
            &[b, n, t] if n == self.config.channels && t == self.config.lookback && b == starts.len() => (b, n, t),
            _ => {
                return Err(GtrError::Shape(format!(
                    "input {shape:?} with {} starts, expected [B, {}, {}]",
                    starts.len(),
                    self.config.channels,
                    self.config.lookback
                )))
            }
        };
        let mut q_bar = self.retrieve_graph(g, vars, starts)?;
        if self.config.gta {
            q_bar = gta_graph(g, q_bar)?;
        }
        let local = g.reshape(x, &[b * n, t])?;
        let global = g.reshape(q_bar, &[b * n, t])?;
        let h = self.fusion.apply(g, &vars[3..], local, global)?;
        let h = g.reshape(h, &[b, n, t])?;
        let h = g.dropout(h, self.config.dropout, training, rng)?;
        Ok(g.add(x, h)?)
    }

    fn bind_constants(&self, g: &mut Graph) -> Vec<Var> {
        self.params().into_iter().map(|p| g.constant(p.clone())).collect()
    }

    /// Retrieved context for one window, `[T, N]`.
    pub fn retrieve(&self, idx: &CycleIndex) -> Result<Tensor, GtrError> {
        let (l, t) = (self.config.cycle_len, self.config.lookback);
        if idx.as_slice().len() != t {
            return Err(GtrError::Shape(format!("index of length {} for lookback {t}", idx.as_slice().len())));
        }
        if let Some(&bad) = idx.as_slice().iter().find(|&&i| i >= l) {
            return Err(EngineError::IndexOutOfRange {
                op: "retrieve",
                index: bad,
                len: l,
            }
            .into());
        }
        let mut g = Graph::new();
        let vars = self.bind_constants(&mut g);
        let gathered = g.gather_rows(vars[0], &[idx.as_slice().to_vec()])?;
        let q = g.linear(gathered, vars[1], vars[2])?;
        let n = self.config.channels;
        Ok(g.value(q).reshaped(&[n, t])?.transpose_last2())
    }

    /// Forward for a single `[T, N]` window starting at absolute step `t0`.
    pub fn forward<R: Rng + ?Sized>(&self, x: &Tensor, t0: usize, training: bool, rng: &mut R) -> Result<Tensor, GtrError> {
        let (t, n) = (self.config.lookback, self.config.channels);
        if x.shape() != [t, n] {
            return Err(GtrError::Shape(format!("input {:?}, expected [{t}, {n}]", x.shape())));
        }
        let mut g = Graph::new();
        let vars = self.bind_constants(&mut g);
        let xc = g.constant(x.transpose_last2().reshaped(&[1, n, t])?);
        let z = self.forward_graph(&mut g, &vars, xc, &[t0], training, rng)?;
        Ok(g.value(z).reshaped(&[n, t])?.transpose_last2())
    }
}

pub(crate) fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape matches buffer")
}
