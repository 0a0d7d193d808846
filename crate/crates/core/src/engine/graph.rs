//! Tape of executed operations and the reverse sweep over it.
//!
//! Nodes are appended in execution order; `backward` walks them in exact
//! reverse order. Leaf gradients accumulate across `backward` calls until
//! `zero_grad`; interior gradients are rebuilt on every call.

use rand::Rng;

use super::kernels::{gemm_acc, transpose};
use super::tensor::{axis_extents, Tensor, MAX_RANK};
use super::EngineError;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Loop structure used by the two-row convolution.
///
/// Both layouts compute the same map; `OneRow` sums each input row as a
/// separate 1D channel and adds the partial results.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvLayout {
    TwoRow,
    OneRow,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Gelu { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulScalar { x: Var, c: f64 },
    Dropout { x: Var, mask: Vec<f64> },
    Mse { pred: Var, target: Var },
    MeanAxis { x: Var, axis: usize },
    VarAxis { x: Var, axis: usize },
    SumAxis { x: Var, axis: usize },
    Expand { x: Var, axis: usize },
    Normalize { x: Var, mean: Var, var: Var, eps: f64, axis: usize },
    Denormalize { y: Var, mean: Var, var: Var, eps: f64, axis: usize },
    Softmax { x: Var, axis: usize },
    SwapLast2 { x: Var },
    Reshape { x: Var },
    Stack { inputs: Vec<Var>, axis: usize },
    GatherRows { table: Var, indices: Vec<Vec<usize>> },
    Conv { f: Var, kernel: Var, bias: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Record of executed operations; owns every intermediate value.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf holding a copy of `value`.
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.leaf(value.clone(), true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, EngineError> {
        if !value.all_finite() {
            return Err(EngineError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), EngineError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(EngineError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(), EngineError> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(EngineError::Invalid {
                op,
                msg: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        Ok(())
    }

    /// `y = x·W + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, EngineError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.is_empty() || ws.len() != 2 || xs[xs.len() - 1] != ws[0] || bs != [ws[1]] {
            return Err(EngineError::ShapeMismatch {
                op: "linear",
                left: xs,
                right: ws,
            });
        }
        let (fin, fout) = (ws[0], ws[1]);
        let m = self.value(x).len() / fin.max(1);
        let mut out = Vec::with_capacity(m * fout);
        let bias = self.value(b).data();
        for _ in 0..m {
            out.extend_from_slice(bias);
        }
        gemm_acc(self.value(x).data(), self.value(w).data(), &mut out, m, fin, fout);
        let mut shape = xs;
        *shape.last_mut().unwrap() = fout;
        let value = Tensor::new(&shape, out)?;
        self.push("linear", value, Op::Linear { x, w, b }, &[x, w, b])
    }

    /// Exact-erf GeLU.
    pub fn gelu(&mut self, x: Var) -> Result<Var, EngineError> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu_scalar(v)).collect();
        let value = Tensor::new(xv.shape(), data)?;
        self.push("gelu", value, Op::Gelu { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.same_shape("add", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::new(av.shape(), data)?;
        self.push("add", value, Op::Add { a, b }, &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.same_shape("mul", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::new(av.shape(), data)?;
        self.push("mul", value, Op::Mul { a, b }, &[a, b])
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var, EngineError> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(xv.shape(), data)?;
        self.push("mul_scalar", value, Op::MulScalar { x, c }, &[x])
    }

    /// Inverted dropout. Outside training, or at rate 0, returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, EngineError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(EngineError::Invalid {
                op: "dropout",
                msg: format!("rate {rate} outside [0, 1)"),
            });
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - rate);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(xv.shape(), data)?;
        self.push("dropout", value, Op::Dropout { x, mask }, &[x])
    }

    /// Mean squared error over all elements, as a rank-0 tensor.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var, EngineError> {
        self.same_shape("mse_loss", pred, target)?;
        let (p, t) = (self.value(pred), self.value(target));
        if p.is_empty() {
            return Err(EngineError::Invalid {
                op: "mse_loss",
                msg: "empty input".into(),
            });
        }
        let sum: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let value = Tensor::scalar(sum / p.len() as f64);
        self.push("mse_loss", value, Op::Mse { pred, target }, &[pred, target])
    }

    fn reduce_shape(&self, x: Var, axis: usize) -> Vec<usize> {
        let mut s = self.shape(x).to_vec();
        s.remove(axis);
        s
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, EngineError> {
        self.check_axis("sum_axis", x, axis)?;
        let (outer, len, inner) = axis_extents(self.shape(x), axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                let row = &src[(o * len + i) * inner..(o * len + i + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let value = Tensor::new(&self.reduce_shape(x, axis), out)?;
        self.push("sum_axis", value, Op::SumAxis { x, axis }, &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, EngineError> {
        self.check_axis("mean_axis", x, axis)?;
        let value = mean_along(self.value(x), axis);
        self.push("mean_axis", value, Op::MeanAxis { x, axis }, &[x])
    }

    /// Population variance (denominator = axis length).
    pub fn var_axis(&mut self, x: Var, axis: usize) -> Result<Var, EngineError> {
        self.check_axis("var_axis", x, axis)?;
        let xv = self.value(x);
        let mean = mean_along(xv, axis);
        let (outer, len, inner) = axis_extents(xv.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                for j in 0..inner {
                    let d = xv.data()[(o * len + i) * inner + j] - mean.data()[o * inner + j];
                    out[o * inner + j] += d * d;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let value = Tensor::new(mean.shape(), out)?;
        self.push("var_axis", value, Op::VarAxis { x, axis }, &[x])
    }

    /// Inserts a new axis of size `n` at `axis` by replication.
    pub fn expand_axis(&mut self, x: Var, axis: usize, n: usize) -> Result<Var, EngineError> {
        let mut shape = self.shape(x).to_vec();
        if axis > shape.len() || shape.len() + 1 > MAX_RANK {
            return Err(EngineError::Invalid {
                op: "expand_axis",
                msg: format!("cannot insert axis {axis} into shape {shape:?}"),
            });
        }
        shape.insert(axis, n);
        let (outer, _, inner) = axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        let value = Tensor::new(&shape, out)?;
        self.push("expand_axis", value, Op::Expand { x, axis }, &[x])
    }

    fn stats_shape_ok(&self, op: &'static str, x: Var, stat: Var, axis: usize) -> Result<(), EngineError> {
        self.check_axis(op, x, axis)?;
        let expect = self.reduce_shape(x, axis);
        if self.shape(stat) != expect.as_slice() {
            return Err(EngineError::ShapeMismatch {
                op,
                left: expect,
                right: self.shape(stat).to_vec(),
            });
        }
        Ok(())
    }

    /// `(x − mean) / sqrt(var + eps)` with statistics broadcast along `axis`.
    pub fn normalize_axis(&mut self, x: Var, mean: Var, var: Var, eps: f64, axis: usize) -> Result<Var, EngineError> {
        self.stats_shape_ok("normalize_axis", x, mean, axis)?;
        self.stats_shape_ok("normalize_axis", x, var, axis)?;
        let xv = self.value(x);
        let (m, v) = (self.value(mean).data(), self.value(var).data());
        let (outer, len, inner) = axis_extents(xv.shape(), axis);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..len {
                for j in 0..inner {
                    let k = o * inner + j;
                    let idx = (o * len + i) * inner + j;
                    out[idx] = (xv.data()[idx] - m[k]) / (v[k] + eps).sqrt();
                }
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        self.push(
            "normalize_axis",
            value,
            Op::Normalize { x, mean, var, eps, axis },
            &[x, mean, var],
        )
    }

    /// `y · sqrt(var + eps) + mean`, the inverse of [`Graph::normalize_axis`].
    pub fn denormalize_axis(&mut self, y: Var, mean: Var, var: Var, eps: f64, axis: usize) -> Result<Var, EngineError> {
        self.stats_shape_ok("denormalize_axis", y, mean, axis)?;
        self.stats_shape_ok("denormalize_axis", y, var, axis)?;
        let yv = self.value(y);
        let (m, v) = (self.value(mean).data(), self.value(var).data());
        let (outer, len, inner) = axis_extents(yv.shape(), axis);
        let mut out = vec![0.0; yv.len()];
        for o in 0..outer {
            for i in 0..len {
                for j in 0..inner {
                    let k = o * inner + j;
                    let idx = (o * len + i) * inner + j;
                    out[idx] = yv.data()[idx] * (v[k] + eps).sqrt() + m[k];
                }
            }
        }
        let value = Tensor::new(yv.shape(), out)?;
        self.push(
            "denormalize_axis",
            value,
            Op::Denormalize { y, mean, var, eps, axis },
            &[y, mean, var],
        )
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var, EngineError> {
        self.check_axis("softmax_axis", x, axis)?;
        let xv = self.value(x);
        let (outer, len, inner) = axis_extents(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| src[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..len {
                    let e = (src[at(i)] - max).exp();
                    out[at(i)] = e;
                    total += e;
                }
                for i in 0..len {
                    out[at(i)] /= total;
                }
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        self.push("softmax_axis", value, Op::Softmax { x, axis }, &[x])
    }

    pub fn swap_last2(&mut self, x: Var) -> Result<Var, EngineError> {
        if self.shape(x).len() < 2 {
            return Err(EngineError::Invalid {
                op: "swap_last2",
                msg: "rank below 2".into(),
            });
        }
        let value = self.value(x).transpose_last2();
        self.push("swap_last2", value, Op::SwapLast2 { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, EngineError> {
        let value = self.value(x).reshaped(shape)?;
        self.push("reshape", value, Op::Reshape { x }, &[x])
    }

    /// Stacks equal-shape tensors along a new axis inserted at `axis`.
    pub fn stack(&mut self, inputs: &[Var], axis: usize) -> Result<Var, EngineError> {
        let first = *inputs.first().ok_or(EngineError::Invalid {
            op: "stack",
            msg: "no inputs".into(),
        })?;
        for &v in &inputs[1..] {
            self.same_shape("stack", first, v)?;
        }
        let mut shape = self.shape(first).to_vec();
        if axis > shape.len() || shape.len() + 1 > MAX_RANK {
            return Err(EngineError::Invalid {
                op: "stack",
                msg: format!("cannot stack at axis {axis} onto shape {shape:?}"),
            });
        }
        shape.insert(axis, inputs.len());
        let (outer, k, inner) = axis_extents(&shape, axis);
        let mut out = Vec::with_capacity(outer * k * inner);
        for o in 0..outer {
            for &v in inputs {
                out.extend_from_slice(&self.value(v).data()[o * inner..(o + 1) * inner]);
            }
        }
        let value = Tensor::new(&shape, out)?;
        self.push(
            "stack",
            value,
            Op::Stack {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Gathers rows of a `rows×cols` table into a `[batch, cols, len]` tensor:
    /// `out[b, c, t] = table[indices[b][t], c]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[Vec<usize>]) -> Result<Var, EngineError> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(EngineError::Invalid {
                op: "gather_rows",
                msg: format!("table must be rank 2, got {ts:?}"),
            });
        }
        let (rows, cols) = (ts[0], ts[1]);
        let len = indices.first().map_or(0, Vec::len);
        let tab = self.value(table).data();
        let mut out = vec![0.0; indices.len() * cols * len];
        for (b, idx) in indices.iter().enumerate() {
            if idx.len() != len {
                return Err(EngineError::ShapeMismatch {
                    op: "gather_rows",
                    left: vec![len],
                    right: vec![idx.len()],
                });
            }
            for (t, &r) in idx.iter().enumerate() {
                if r >= rows {
                    return Err(EngineError::IndexOutOfRange {
                        op: "gather_rows",
                        index: r,
                        len: rows,
                    });
                }
                for c in 0..cols {
                    out[(b * cols + c) * len + t] = tab[r * cols + c];
                }
            }
        }
        let value = Tensor::new(&[indices.len(), cols, len], out)?;
        self.push(
            "gather_rows",
            value,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        )
    }

    /// Single-output cross-correlation over stacked row pairs.
    ///
    /// `f` is `[2, T]` or `[M, 2, T]`, `kernel` is `[2, W]` with odd `W`,
    /// `bias` is `[1]`. Time is zero-padded by `W / 2` at both ends so the
    /// output is `[T]` or `[M, T]`.
    pub fn conv_rows(&mut self, f: Var, kernel: Var, bias: Var, layout: ConvLayout) -> Result<Var, EngineError> {
        let fs = self.shape(f).to_vec();
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 2 || ks[0] != 2 {
            return Err(EngineError::Invalid {
                op: "conv_rows",
                msg: format!("kernel must have 2 rows, got shape {ks:?}"),
            });
        }
        let width = ks[1];
        if width.is_multiple_of(2) {
            return Err(EngineError::Invalid {
                op: "conv_rows",
                msg: format!("kernel width {width} is even"),
            });
        }
        if self.shape(bias) != [1] {
            return Err(EngineError::ShapeMismatch {
                op: "conv_rows",
                left: vec![1],
                right: self.shape(bias).to_vec(),
            });
        }
        let (m, t_len, out_shape) = match fs.as_slice() {
            [2, t] => (1, *t, vec![*t]),
            [m, 2, t] => (*m, *t, vec![*m, *t]),
            _ => {
                return Err(EngineError::Invalid {
                    op: "conv_rows",
                    msg: format!("input must be [2, T] or [M, 2, T], got {fs:?}"),
                })
            }
        };
        let out = conv_forward(
            self.value(f).data(),
            self.value(kernel).data(),
            self.value(bias).item(),
            m,
            t_len,
            width,
            layout,
        );
        let value = Tensor::new(&out_shape, out)?;
        self.push("conv_rows", value, Op::Conv { f, kernel, bias }, &[f, kernel, bias])
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            None => node.grad = Some(contrib),
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), EngineError> {
        if self.value(loss).len() != 1 {
            return Err(EngineError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.accumulate(loss, vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contribs = self.adjoints(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, c) in contribs {
                self.accumulate(v, c);
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn adjoints(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (fin, fout) = (ws[0], ws[1]);
                let m = g.len() / fout.max(1);
                if self.wants(*x) {
                    let wt = transpose(self.value(*w).data(), fin, fout);
                    let mut dx = vec![0.0; m * fin];
                    gemm_acc(g, &wt, &mut dx, m, fout, fin);
                    out.push((*x, dx));
                }
                if self.wants(*w) {
                    let xt = transpose(self.value(*x).data(), m, fin);
                    let mut dw = vec![0.0; fin * fout];
                    gemm_acc(&xt, g, &mut dw, fin, m, fout);
                    out.push((*w, dw));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; fout];
                    for row in g.chunks(fout) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    out.push((*b, db));
                }
            }
            Op::Gelu { x } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, gv)| gv * gelu_derivative(v))
                    .collect();
                out.push((*x, dx));
            }
            Op::Add { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    out.push((*a, g.iter().zip(bv).map(|(x, y)| x * y).collect()));
                }
                if self.wants(*b) {
                    out.push((*b, g.iter().zip(av).map(|(x, y)| x * y).collect()));
                }
            }
            Op::MulScalar { x, c } => out.push((*x, g.iter().map(|v| v * c).collect())),
            Op::Dropout { x, mask } => out.push((*x, g.iter().zip(mask).map(|(a, m)| a * m).collect())),
            Op::Mse { pred, target } => {
                let (p, t) = (self.value(*pred).data(), self.value(*target).data());
                let scale = 2.0 * g[0] / p.len() as f64;
                let dp: Vec<f64> = p.iter().zip(t).map(|(a, b)| scale * (a - b)).collect();
                if self.wants(*target) {
                    out.push((*target, dp.iter().map(|v| -v).collect()));
                }
                out.push((*pred, dp));
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = axis_extents(self.shape(*x), *axis);
                let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let mut dx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        dx.extend(g[o * inner..(o + 1) * inner].iter().map(|v| v * scale));
                    }
                }
                out.push((*x, dx));
            }
            Op::VarAxis { x, axis } => {
                let xv = self.value(*x);
                let mean = mean_along(xv, *axis);
                let (outer, len, inner) = axis_extents(xv.shape(), *axis);
                let mut dx = vec![0.0; xv.len()];
                for o in 0..outer {
                    for i in 0..len {
                        for j in 0..inner {
                            let idx = (o * len + i) * inner + j;
                            let k = o * inner + j;
                            dx[idx] = g[k] * 2.0 * (xv.data()[idx] - mean.data()[k]) / len as f64;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Expand { x, axis } => {
                let (outer, n, inner) = axis_extents(node.value.shape(), *axis);
                let mut dx = vec![0.0; outer * inner];
                for o in 0..outer {
                    for r in 0..n {
                        let row = &g[(o * n + r) * inner..(o * n + r + 1) * inner];
                        dx[o * inner..(o + 1) * inner]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(a, v)| *a += v);
                    }
                }
                out.push((*x, dx));
            }
            Op::Normalize { x, mean, var, eps, axis } => {
                let xv = self.value(*x);
                let (m, v) = (self.value(*mean).data(), self.value(*var).data());
                let (outer, len, inner) = axis_extents(xv.shape(), *axis);
                let mut dx = vec![0.0; xv.len()];
                let mut dm = vec![0.0; m.len()];
                let mut dv = vec![0.0; v.len()];
                for o in 0..outer {
                    for i in 0..len {
                        for j in 0..inner {
                            let k = o * inner + j;
                            let idx = (o * len + i) * inner + j;
                            let denom = v[k] + eps;
                            let inv = 1.0 / denom.sqrt();
                            dx[idx] = g[idx] * inv;
                            dm[k] -= g[idx] * inv;
                            dv[k] -= 0.5 * g[idx] * (xv.data()[idx] - m[k]) * inv / denom;
                        }
                    }
                }
                out.push((*x, dx));
                out.push((*mean, dm));
                out.push((*var, dv));
            }
            Op::Denormalize { y, mean, var, eps, axis } => {
                let yv = self.value(*y);
                let v = self.value(*var).data();
                let (outer, len, inner) = axis_extents(yv.shape(), *axis);
                let mut dy = vec![0.0; yv.len()];
                let mut dm = vec![0.0; v.len()];
                let mut dv = vec![0.0; v.len()];
                for o in 0..outer {
                    for i in 0..len {
                        for j in 0..inner {
                            let k = o * inner + j;
                            let idx = (o * len + i) * inner + j;
                            let sd = (v[k] + eps).sqrt();
                            dy[idx] = g[idx] * sd;
                            dm[k] += g[idx];
                            dv[k] += 0.5 * g[idx] * yv.data()[idx] / sd;
                        }
                    }
                }
                out.push((*y, dy));
                out.push((*mean, dm));
                out.push((*var, dv));
            }
            Op::Softmax { x: xin, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + j;
                        let dot: f64 = (0..len).map(|i| g[at(i)] * y[at(i)]).sum();
                        for i in 0..len {
                            dx[at(i)] = y[at(i)] * (g[at(i)] - dot);
                        }
                    }
                }
                out.push((*xin, dx));
            }
            Op::SwapLast2 { x } => {
                let gt = Tensor::new(node.value.shape(), g.to_vec())
                    .expect("gradient matches value shape")
                    .transpose_last2();
                out.push((*x, gt.into_data()));
            }
            Op::Reshape { x } => out.push((*x, g.to_vec())),
            Op::Stack { inputs, axis } => {
                let (outer, k, inner) = axis_extents(node.value.shape(), *axis);
                for (c, &v) in inputs.iter().enumerate() {
                    if !self.wants(v) {
                        continue;
                    }
                    let mut d = Vec::with_capacity(outer * inner);
                    for o in 0..outer {
                        d.extend_from_slice(&g[(o * k + c) * inner..(o * k + c + 1) * inner]);
                    }
                    out.push((v, d));
                }
            }
            Op::GatherRows { table, indices } => {
                let cols = self.shape(*table)[1];
                let mut dt = vec![0.0; self.value(*table).len()];
                for (b, idx) in indices.iter().enumerate() {
                    let len = idx.len();
                    for (t, &r) in idx.iter().enumerate() {
                        for c in 0..cols {
                            dt[r * cols + c] += g[(b * cols + c) * len + t];
                        }
                    }
                }
                out.push((*table, dt));
            }
            Op::Conv { f, kernel, bias } => {
                let fv = self.value(*f);
                let t_len = *fv.shape().last().unwrap();
                let m = fv.len() / (2 * t_len).max(1);
                let k = self.value(*kernel).data();
                let width = k.len() / 2;
                let pad = width / 2;
                let src = fv.data();
                if self.wants(*f) {
                    let mut df = vec![0.0; src.len()];
                    for mi in 0..m {
                        let grow = &g[mi * t_len..(mi + 1) * t_len];
                        for r in 0..2 {
                            let drow = &mut df[(mi * 2 + r) * t_len..(mi * 2 + r + 1) * t_len];
                            for (t, &gv) in grow.iter().enumerate() {
                                for w in 0..width {
                                    let s = t + w;
                                    if s >= pad && s - pad < t_len {
                                        drow[s - pad] += k[r * width + w] * gv;
                                    }
                                }
                            }
                        }
                    }
                    out.push((*f, df));
                }
                if self.wants(*kernel) {
                    let mut dk = vec![0.0; 2 * width];
                    for mi in 0..m {
                        let grow = &g[mi * t_len..(mi + 1) * t_len];
                        for r in 0..2 {
                            let frow = &src[(mi * 2 + r) * t_len..(mi * 2 + r + 1) * t_len];
                            for w in 0..width {
                                let mut acc = 0.0;
                                for (t, &gv) in grow.iter().enumerate() {
                                    let s = t + w;
                                    if s >= pad && s - pad < t_len {
                                        acc += gv * frow[s - pad];
                                    }
                                }
                                dk[r * width + w] += acc;
                            }
                        }
                    }
                    out.push((*kernel, dk));
                }
                if self.wants(*bias) {
                    out.push((*bias, vec![g.iter().sum()]));
                }
            }
        }
        out
    }
}

fn mean_along(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_extents(x.shape(), axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..len {
            for j in 0..inner {
                out[o * inner + j] += x.data()[(o * len + i) * inner + j];
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= len as f64);
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Tensor::new(&shape, out).expect("reduced shape")
}

fn conv_forward(src: &[f64], k: &[f64], bias: f64, m: usize, t_len: usize, width: usize, layout: ConvLayout) -> Vec<f64> {
    let pad = width / 2;
    let mut out = vec![0.0; m * t_len];
    for mi in 0..m {
        let rows = [
            &src[mi * 2 * t_len..(mi * 2 + 1) * t_len],
            &src[(mi * 2 + 1) * t_len..(mi * 2 + 2) * t_len],
        ];
        let orow = &mut out[mi * t_len..(mi + 1) * t_len];
        match layout {
            ConvLayout::TwoRow => {
                for (t, o) in orow.iter_mut().enumerate() {
                    let mut acc = bias;
                    for (r, row) in rows.iter().enumerate() {
                        for w in 0..width {
                            let s = t + w;
                            if s >= pad && s - pad < t_len {
                                acc += k[r * width + w] * row[s - pad];
                            }
                        }
                    }
                    *o = acc;
                }
            }
            ConvLayout::OneRow => {
                let mut partial = [vec![0.0; t_len], vec![0.0; t_len]];
                for (r, row) in rows.iter().enumerate() {
                    for w in 0..width {
                        let kv = k[r * width + w];
                        for (t, p) in partial[r].iter_mut().enumerate() {
                            let s = t + w;
                            if s >= pad && s - pad < t_len {
                                *p += kv * row[s - pad];
                            }
                        }
                    }
                }
                for (t, o) in orow.iter_mut().enumerate() {
                    *o = bias + (partial[0][t] + partial[1][t]);
                }
            }
        }
    }
    out
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}
