//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters are copied in
//! by name, so the same [`ParameterSet`] can back any number of graphs, and
//! [`Graph::backward`] hands gradients back keyed by the recorded nodes.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::kernels::{col2im, conv_output_size, conv_transpose_output_size, gemm, im2col, ConvGeometry};
use super::params::ParameterSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BATCH_NORM_EPSILON: f64 = 1e-5;
/// Probabilities inside logarithms are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;

/// A scalar function applied entrywise, with its derivative.
pub trait PointwiseFn: Send + Sync + fmt::Debug {
    fn value(&self, x: f64) -> f64;
    /// Derivative used during the backward pass. It does not have to be the
    /// derivative of [`PointwiseFn::value`] (straight-through estimators).
    fn derivative(&self, x: f64) -> f64;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Batch statistics; running averages are recorded for later update.
    Train,
    /// Running statistics; the graph has no cross-sample dependencies.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry, out_channels: usize },
    ConvT2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry, in_channels: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Activation { x: Var, kind: Activation },
    Pointwise { x: Var, f: Arc<dyn PointwiseFn> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst { x: Var, c: Vec<f64> },
    Concat { a: Var, b: Var },
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    EmbedGrid { x: Var, side: usize },
    Sum(Var),
    Mean(Var),
    MeanSquaredError { pred: Var, target: Vec<f64> },
    BceWithLogits { logits: Var, target: Vec<f64> },
    BitCrossEntropy { q: Var, z: Var, active: Vec<bool> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    GaussianSample { mu: Var, log_var: Var, noise: Vec<f64> },
    KlStdNormal { mu: Var, log_var: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics observed by a train-mode batch norm, waiting to be folded
/// into the running averages of the parameter set.
#[derive(Clone, Debug)]
pub(crate) struct RunningUpdate {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    pub(crate) running_updates: Vec<RunningUpdate>,
}

/// Gradients of a scalar with respect to every node that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(usize, String)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads.get(v.0)?.as_ref().map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient of a leaf, zeros if the loss did not depend on it.
    pub fn get_or_zero(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Adds every parameter gradient into `params`. Parameters that were
    /// recorded but did not influence the loss receive an explicit zero.
    pub fn accumulate_into(&self, params: &mut ParameterSet) -> Result<()> {
        self.accumulate_where(params, |_| true)
    }

    /// Like [`Gradients::accumulate_into`], restricted to names accepted by `keep`.
    pub fn accumulate_where(&self, params: &mut ParameterSet, keep: impl Fn(&str) -> bool) -> Result<()> {
        for (idx, name) in &self.params {
            if keep(name) {
                let g = self.get_or_zero(Var(*idx));
                params.accumulate_grad(name, &g)?;
            }
        }
        Ok(())
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(&contribution) {
                *a += b;
            }
        }
        None => *slot = Some(contribution),
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A constant leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (not tied to a parameter set).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copies parameter `name` into the graph.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        let value = params.value(name)?.clone();
        Ok(self.push(value, Op::Param(name.to_string()), true))
    }

    /// `x [n, i] · wᵀ + b` with `w [o, i]` and `b [o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::dim("linear", format!("input {xs:?} against weight {ws:?}")));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::dim("linear", format!("bias {:?}, expected [{o}]", self.shape(b))));
            }
        }
        let mut out = vec![0.0; n * o];
        gemm(n, i, o, self.value(x).data(), false, self.value(w).data(), true, &mut out, false);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(o) {
                for (y, bb) in row.iter_mut().zip(bias) {
                    *y += bb;
                }
            }
        }
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.rg(&[b]));
        Ok(self.push(Tensor::from_parts(vec![n, o], out), Op::Linear { x, w, b }, rg))
    }

    /// 2-D convolution. `x [n, c, h, w]`, `w [o, c, k, k]`, `b [o]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(Error::dim("conv2d", format!("input {xs:?} against weight {ws:?}")));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        let oh = conv_output_size(h, k, stride, pad);
        let ow = conv_output_size(wd, k, stride, pad);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::dim("conv2d", format!("kernel {k} does not fit input {h}x{wd}")));
        };
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::dim("conv2d", "bias length differs from output channels"));
            }
        }
        let geom =
            ConvGeometry { channels: c, height: h, width: wd, kernel: k, stride, pad, out_height: oh, out_width: ow };
        let (rows, npos) = (geom.cols_rows(), geom.cols_cols());
        let mut cols = vec![0.0; rows * npos];
        let mut out = vec![0.0; n * o * npos];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let sample = c * h * wd;
        for s in 0..n {
            im2col(&xv[s * sample..(s + 1) * sample], &geom, &mut cols);
            gemm(o, rows, npos, wv, false, &cols, false, &mut out[s * o * npos..(s + 1) * o * npos], false);
        }
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (chunk, ch) in out.chunks_mut(npos).zip((0..o).cycle()) {
                chunk.iter_mut().for_each(|y| *y += bias[ch]);
            }
        }
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.rg(&[b]));
        Ok(self.push(Tensor::from_parts(vec![n, o, oh, ow], out), Op::Conv2d { x, w, b, geom, out_channels: o }, rg))
    }

    /// Transposed 2-D convolution. `x [n, ci, h, w]`, `w [ci, co, k, k]`, `b [co]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[2] != ws[3] {
            return Err(Error::dim("conv_transpose2d", format!("input {xs:?} against weight {ws:?}")));
        }
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[1], ws[2]);
        let oh = conv_transpose_output_size(h, k, stride, pad);
        let ow = conv_transpose_output_size(wd, k, stride, pad);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::dim("conv_transpose2d", "padding exceeds output size"));
        };
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(Error::dim("conv_transpose2d", "bias length differs from output channels"));
            }
        }
        // Viewed as the adjoint of a convolution from the output grid back to the input grid.
        let geom =
            ConvGeometry { channels: co, height: oh, width: ow, kernel: k, stride, pad, out_height: h, out_width: wd };
        let (rows, npos) = (geom.cols_rows(), geom.cols_cols());
        let mut cols = vec![0.0; rows * npos];
        let out_sample = co * oh * ow;
        let mut out = vec![0.0; n * out_sample];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for s in 0..n {
            gemm(rows, ci, npos, wv, true, &xv[s * ci * npos..(s + 1) * ci * npos], false, &mut cols, false);
            col2im(&cols, &geom, &mut out[s * out_sample..(s + 1) * out_sample]);
        }
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (chunk, ch) in out.chunks_mut(oh * ow).zip((0..co).cycle()) {
                chunk.iter_mut().for_each(|y| *y += bias[ch]);
            }
        }
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.rg(&[b]));
        Ok(self.push(Tensor::from_parts(vec![n, co, oh, ow], out), Op::ConvT2d { x, w, b, geom, in_channels: ci }, rg))
    }

    /// Per-channel normalization over batch (and spatial) positions for
    /// `[n, c]` or `[n, c, h, w]` inputs. In [`Mode::Eval`], `running` supplies
    /// `(mean, var)`; in [`Mode::Train`] the batch statistics are used and
    /// returned as `(mean, unbiased var)`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 && xs.len() != 4 {
            return Err(Error::dim("batch_norm", format!("unsupported input shape {xs:?}")));
        }
        let (n, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("batch_norm", format!("affine parameters must have length {c}")));
        }
        let m = (n * spatial) as f64;
        let xv = self.value(x).data();
        let idx = |s: usize, ch: usize, p: usize| (s * c + ch) * spatial + p;
        let mut means = vec![0.0; c];
        let mut vars = vec![0.0; c];
        let batch_stats = running.is_none();
        match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::dim("batch_norm", "running statistics length"));
                }
                means.copy_from_slice(rm);
                vars.copy_from_slice(rv);
            }
            None => {
                if n * spatial < 2 {
                    return Err(Error::dim("batch_norm", "batch statistics need at least two values per channel"));
                }
                for ch in 0..c {
                    let mut sum = 0.0;
                    for s in 0..n {
                        for p in 0..spatial {
                            sum += xv[idx(s, ch, p)];
                        }
                    }
                    let mean = sum / m;
                    let mut sq = 0.0;
                    for s in 0..n {
                        for p in 0..spatial {
                            let d = xv[idx(s, ch, p)] - mean;
                            sq += d * d;
                        }
                    }
                    means[ch] = mean;
                    vars[ch] = sq / m;
                }
            }
        }
        let inv_std: Vec<f64> = vars.iter().map(|v| 1.0 / (v + BATCH_NORM_EPSILON).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for s in 0..n {
            for ch in 0..c {
                for p in 0..spatial {
                    let i = idx(s, ch, p);
                    xhat[i] = (xv[i] - means[ch]) * inv_std[ch];
                    out[i] = gv[ch] * xhat[i] + bv[ch];
                }
            }
        }
        let stats = batch_stats.then(|| {
            let unbiased = m / (m - 1.0);
            (means, vars.iter().map(|v| v * unbiased).collect())
        });
        let rg = self.rg(&[x, gamma, beta]);
        let var =
            self.push(Tensor::from_parts(xs, out), Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats }, rg);
        Ok((var, stats))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let value = self.value(x).map(|v| kind.apply(v));
        let rg = self.rg(&[x]);
        self.push(value, Op::Activation { x, kind }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn pointwise(&mut self, x: Var, f: Arc<dyn PointwiseFn>) -> Var {
        let value = self.value(x).map(|v| f.value(v));
        let rg = self.rg(&[x]);
        self.push(value, Op::Pointwise { x, f }, rg)
    }

    fn same_shape(&self, ctx: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(ctx, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, factor), rg)
    }

    /// Entrywise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::dim("mul_const", format!("{:?} vs {:?}", self.shape(x), c.shape())));
        }
        let data = self.value(x).data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let value = Tensor::from_parts(c.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MulConst { x, c: c.data().to_vec() }, rg))
    }

    /// Column-wise concatenation of two `[n, ·]` matrices.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::dim("concat", format!("{sa:?} vs {sb:?}")));
        }
        let (n, p, q) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(n * (p + q));
        for r in 0..n {
            out.extend_from_slice(self.value(a).row(r));
            out.extend_from_slice(self.value(b).row(r));
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![n, p + q], out), Op::Concat { a, b }, rg))
    }

    /// Columns `start..start + len` of a `[n, ·]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(Error::dim("slice_cols", format!("{start}..{} of {s:?}", start + len)));
        }
        let n = s[0];
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&self.value(x).row(r)[start..start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![n, len], out), Op::SliceCols { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Places each row of `x [n, m]` in raster order into a zero-padded
    /// `[n, 1, side, side]` grid.
    pub fn embed_grid(&mut self, x: Var, side: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[1] > side * side {
            return Err(Error::dim("embed_grid", format!("{s:?} into a {side}x{side} grid")));
        }
        let (n, m) = (s[0], s[1]);
        let cells = side * side;
        let mut out = vec![0.0; n * cells];
        for r in 0..n {
            out[r * cells..r * cells + m].copy_from_slice(self.value(x).row(r));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![n, 1, side, side], out), Op::EmbedGrid { x, side }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    /// Mean over all entries of `(pred - target)²`.
    pub fn mean_squared_error(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::dim("mean_squared_error", format!("{:?} vs {:?}", self.shape(pred), target.shape())));
        }
        let p = self.value(pred).data();
        let loss = p.iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        let rg = self.rg(&[pred]);
        Ok(self.push(Tensor::scalar(loss), Op::MeanSquaredError { pred, target: target.data().to_vec() }, rg))
    }

    /// Mean over all entries of the binary cross-entropy between
    /// `sigmoid(logits)` and `target ∈ [0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        if self.shape(logits) != target.shape() {
            return Err(Error::dim("bce_with_logits", format!("{:?} vs {:?}", self.shape(logits), target.shape())));
        }
        let l = self.value(logits).data();
        let loss = l.iter().zip(target.data()).map(|(&x, &t)| softplus(x) - t * x).sum::<f64>() / l.len() as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits { logits, target: target.data().to_vec() }, rg))
    }

    /// Cross-entropy in nats of bits `z` under Bernoulli probabilities `q`,
    /// summed over the `active` cells of each sample and averaged over samples.
    /// Both inputs are `[n, ...]` with `active` covering one sample.
    pub fn bit_cross_entropy(&mut self, q: Var, z: Var, active: &[bool]) -> Result<Var> {
        self.same_shape("bit_cross_entropy", q, z)?;
        let qt = self.value(q);
        if qt.row_len() != active.len() {
            return Err(Error::dim("bit_cross_entropy", "active mask does not cover one sample"));
        }
        let n = qt.rows();
        let mut total = 0.0;
        for (i, (&qi, &zi)) in qt.data().iter().zip(self.value(z).data()).enumerate() {
            if active[i % active.len()] {
                let qc = qi.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                total -= zi * qc.ln() + (1.0 - zi) * (1.0 - qc).ln();
            }
        }
        let rg = self.rg(&[q, z]);
        Ok(self.push(Tensor::scalar(total / n as f64), Op::BitCrossEntropy { q, z, active: active.to_vec() }, rg))
    }

    /// Mean negative log-softmax likelihood of integer `labels`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim("softmax_cross_entropy", format!("logits {s:?} for {} labels", labels.len())));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::dim("softmax_cross_entropy", format!("label {bad} out of {k} classes")));
        }
        let mut probs = vec![0.0; labels.len() * k];
        let mut loss = 0.0;
        for (r, (&label, p)) in labels.iter().zip(probs.chunks_mut(k)).enumerate() {
            let row = self.value(logits).row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (pi, &l) in p.iter_mut().zip(row) {
                *pi = (l - max).exp();
                z += *pi;
            }
            p.iter_mut().for_each(|pi| *pi /= z);
            loss -= row[label] - max - z.ln();
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / labels.len() as f64),
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
            rg,
        ))
    }

    /// Reparameterized draw `mu + exp(log_var / 2) ⊙ noise`.
    pub fn gaussian_sample(&mut self, mu: Var, log_var: Var, noise: &Tensor) -> Result<Var> {
        self.same_shape("gaussian_sample", mu, log_var)?;
        if self.shape(mu) != noise.shape() {
            return Err(Error::dim("gaussian_sample", "noise shape differs from posterior"));
        }
        let data = self
            .value(mu)
            .data()
            .iter()
            .zip(self.value(log_var).data())
            .zip(noise.data())
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();
        let value = Tensor::from_parts(noise.shape().to_vec(), data);
        let rg = self.rg(&[mu, log_var]);
        Ok(self.push(value, Op::GaussianSample { mu, log_var, noise: noise.data().to_vec() }, rg))
    }

    /// KL divergence of diagonal Gaussians `[n, m]` to `N(0, I)`, summed over
    /// dimensions and averaged over rows.
    pub fn kl_std_normal(&mut self, mu: Var, log_var: Var) -> Result<Var> {
        self.same_shape("kl_std_normal", mu, log_var)?;
        let n = self.value(mu).rows();
        let total: f64 = self
            .value(mu)
            .data()
            .iter()
            .zip(self.value(log_var).data())
            .map(|(m, lv)| 0.5 * (m * m + lv.exp() - lv - 1.0))
            .sum();
        let rg = self.rg(&[mu, log_var]);
        Ok(self.push(Tensor::scalar(total / n as f64), Op::KlStdNormal { mu, log_var }, rg))
    }

    /// Gradients of the scalar `loss` with respect to every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::Usage("backward called without a recorded forward pass".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Param(name) => Some((i, name.clone())),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(), params })
    }

    /// Runs [`Graph::backward`] and accumulates parameter gradients.
    pub fn backward_into(&self, loss: Var, params: &mut ParameterSet) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(params)?;
        Ok(grads)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, inp) = (xs[0], xs[1]);
                let o = self.shape(*w)[0];
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * inp];
                    gemm(n, o, inp, gy, false, val(*w), false, &mut dx, false);
                    add_into(&mut grads[x.0], dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; o * inp];
                    gemm(o, n, inp, gy, true, val(*x), false, &mut dw, false);
                    add_into(&mut grads[w.0], dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![0.0; o];
                        for row in gy.chunks(o) {
                            db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                        }
                        add_into(&mut grads[b.0], db);
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, out_channels } => {
                let o = *out_channels;
                let n = self.shape(*x)[0];
                let (rows, npos) = (geom.cols_rows(), geom.cols_cols());
                let sample = geom.channels * geom.height * geom.width;
                let xv = val(*x);
                let wv = val(*w);
                let mut cols = vec![0.0; rows * npos];
                let mut dw = self.wants(*w).then(|| vec![0.0; o * rows]);
                let mut dx = self.wants(*x).then(|| vec![0.0; n * sample]);
                for s in 0..n {
                    let dy = &gy[s * o * npos..(s + 1) * o * npos];
                    if let Some(dw) = dw.as_mut() {
                        im2col(&xv[s * sample..(s + 1) * sample], geom, &mut cols);
                        gemm(o, npos, rows, dy, false, &cols, true, dw, true);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(rows, o, npos, wv, true, dy, false, &mut cols, false);
                        col2im(&cols, geom, &mut dx[s * sample..(s + 1) * sample]);
                    }
                }
                if let Some(dw) = dw {
                    add_into(&mut grads[w.0], dw);
                }
                if let Some(dx) = dx {
                    add_into(&mut grads[x.0], dx);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![0.0; o];
                        for (chunk, ch) in gy.chunks(npos).zip((0..o).cycle()) {
                            db[ch] += chunk.iter().sum::<f64>();
                        }
                        add_into(&mut grads[b.0], db);
                    }
                }
            }
            Op::ConvT2d { x, w, b, geom, in_channels } => {
                let ci = *in_channels;
                let n = self.shape(*x)[0];
                let (rows, npos) = (geom.cols_rows(), geom.cols_cols());
                let out_sample = geom.channels * geom.height * geom.width;
                let xv = val(*x);
                let wv = val(*w);
                let mut cols = vec![0.0; rows * npos];
                let mut dw = self.wants(*w).then(|| vec![0.0; ci * rows]);
                let mut dx = self.wants(*x).then(|| vec![0.0; n * ci * npos]);
                for s in 0..n {
                    im2col(&gy[s * out_sample..(s + 1) * out_sample], geom, &mut cols);
                    if let Some(dx) = dx.as_mut() {
                        gemm(
                            ci,
                            rows,
                            npos,
                            wv,
                            false,
                            &cols,
                            false,
                            &mut dx[s * ci * npos..(s + 1) * ci * npos],
                            false,
                        );
                    }
                    if let Some(dw) = dw.as_mut() {
                        gemm(ci, npos, rows, &xv[s * ci * npos..(s + 1) * ci * npos], false, &cols, true, dw, true);
                    }
                }
                if let Some(dw) = dw {
                    add_into(&mut grads[w.0], dw);
                }
                if let Some(dx) = dx {
                    add_into(&mut grads[x.0], dx);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let co = geom.channels;
                        let plane = geom.height * geom.width;
                        let mut db = vec![0.0; co];
                        for (chunk, ch) in gy.chunks(plane).zip((0..co).cycle()) {
                            db[ch] += chunk.iter().sum::<f64>();
                        }
                        add_into(&mut grads[b.0], db);
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let spatial: usize = xs[2..].iter().product();
                let m = (n * spatial) as f64;
                let gv = val(*gamma);
                let idx = |s: usize, ch: usize, p: usize| (s * c + ch) * spatial + p;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        for p in 0..spatial {
                            let i = idx(s, ch, p);
                            dgamma[ch] += gy[i] * xhat[i];
                            dbeta[ch] += gy[i];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; gy.len()];
                    for ch in 0..c {
                        let scale = gv[ch] * inv_std[ch];
                        for s in 0..n {
                            for p in 0..spatial {
                                let i = idx(s, ch, p);
                                dx[i] = if *batch_stats {
                                    scale * (gy[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m)
                                } else {
                                    scale * gy[i]
                                };
                            }
                        }
                    }
                    add_into(&mut grads[x.0], dx);
                }
                if self.wants(*gamma) {
                    add_into(&mut grads[gamma.0], dgamma);
                }
                if self.wants(*beta) {
                    add_into(&mut grads[beta.0], dbeta);
                }
            }
            Op::Activation { x, kind } => {
                let xv = val(*x);
                let y = node.value.data();
                let dx = gy
                    .iter()
                    .enumerate()
                    .map(|(i, g)| {
                        g * match kind {
                            Activation::Relu => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Activation::Tanh => 1.0 - y[i] * y[i],
                            Activation::Sigmoid => y[i] * (1.0 - y[i]),
                        }
                    })
                    .collect();
                add_into(&mut grads[x.0], dx);
            }
            Op::Pointwise { x, f } => {
                let dx = gy.iter().zip(val(*x)).map(|(g, &v)| g * f.derivative(v)).collect();
                add_into(&mut grads[x.0], dx);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], gy.to_vec());
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], gy.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], gy.to_vec());
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], gy.iter().map(|g| -g).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], gy.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], gy.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(x, f) => add_into(&mut grads[x.0], gy.iter().map(|g| g * f).collect()),
            Op::MulConst { x, c } => add_into(&mut grads[x.0], gy.iter().zip(c).map(|(g, c)| g * c).collect()),
            Op::Concat { a, b } => {
                let p = self.shape(*a)[1];
                let q = self.shape(*b)[1];
                if self.wants(*a) {
                    add_into(&mut grads[a.0], gy.chunks(p + q).flat_map(|r| r[..p].to_vec()).collect());
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], gy.chunks(p + q).flat_map(|r| r[p..].to_vec()).collect());
                }
            }
            Op::SliceCols { x, start } => {
                let s = self.shape(*x);
                let (n, w) = (s[0], s[1]);
                let len = node.value.shape()[1];
                let mut dx = vec![0.0; n * w];
                for r in 0..n {
                    dx[r * w + start..r * w + start + len].copy_from_slice(&gy[r * len..(r + 1) * len]);
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::Reshape(x) => add_into(&mut grads[x.0], gy.to_vec()),
            Op::EmbedGrid { x, side } => {
                let m = self.shape(*x)[1];
                let cells = side * side;
                add_into(&mut grads[x.0], gy.chunks(cells).flat_map(|r| r[..m].to_vec()).collect());
            }
            Op::Sum(x) => add_into(&mut grads[x.0], vec![gy[0]; self.nodes[x.0].value.len()]),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                add_into(&mut grads[x.0], vec![gy[0] / n as f64; n]);
            }
            Op::MeanSquaredError { pred, target } => {
                let n = target.len() as f64;
                let dx = val(*pred).iter().zip(target).map(|(p, t)| gy[0] * 2.0 * (p - t) / n).collect();
                add_into(&mut grads[pred.0], dx);
            }
            Op::BceWithLogits { logits, target } => {
                let n = target.len() as f64;
                let dx = val(*logits).iter().zip(target).map(|(&l, t)| gy[0] * (sigmoid(l) - t) / n).collect();
                add_into(&mut grads[logits.0], dx);
            }
            Op::BitCrossEntropy { q, z, active } => {
                let qv = val(*q);
                let zv = val(*z);
                let n = self.value(*q).rows() as f64;
                let w = active.len();
                if self.wants(*q) {
                    let dq = qv
                        .iter()
                        .zip(zv)
                        .enumerate()
                        .map(|(i, (&qi, &zi))| {
                            if !active[i % w] || !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&qi) {
                                0.0
                            } else {
                                -gy[0] * (zi / qi - (1.0 - zi) / (1.0 - qi)) / n
                            }
                        })
                        .collect();
                    add_into(&mut grads[q.0], dq);
                }
                if self.wants(*z) {
                    let dz = qv
                        .iter()
                        .enumerate()
                        .map(|(i, &qi)| {
                            if !active[i % w] {
                                return 0.0;
                            }
                            let qc = qi.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                            -gy[0] * (qc.ln() - (1.0 - qc).ln()) / n
                        })
                        .collect();
                    add_into(&mut grads[z.0], dz);
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let mut dx: Vec<f64> = probs.iter().map(|p| gy[0] * p / n as f64).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * k + l] -= gy[0] / n as f64;
                }
                add_into(&mut grads[logits.0], dx);
            }
            Op::GaussianSample { mu, log_var, noise } => {
                if self.wants(*mu) {
                    add_into(&mut grads[mu.0], gy.to_vec());
                }
                if self.wants(*log_var) {
                    let d = gy
                        .iter()
                        .zip(val(*log_var))
                        .zip(noise)
                        .map(|((g, lv), e)| g * 0.5 * (0.5 * lv).exp() * e)
                        .collect();
                    add_into(&mut grads[log_var.0], d);
                }
            }
            Op::KlStdNormal { mu, log_var } => {
                let n = self.value(*mu).rows() as f64;
                if self.wants(*mu) {
                    add_into(&mut grads[mu.0], val(*mu).iter().map(|m| gy[0] * m / n).collect());
                }
                if self.wants(*log_var) {
                    let d = val(*log_var).iter().map(|lv| gy[0] * 0.5 * (lv.exp() - 1.0) / n).collect();
                    add_into(&mut grads[log_var.0], d);
                }
            }
        }
    }
}
