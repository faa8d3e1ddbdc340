//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its variables. Calling
//! [`Tape::backward`] on a `1 × 1` result walks the recording once in
//! reverse order and returns the gradient of every tracked variable.
//!
//! ```
//! use sfdr::autodiff::Tape;
//! use sfdr::Tensor;
//!
//! let mut tape = Tape::new();
//! let a = tape.param(Tensor::from_rows(&[&[1.0, 2.0]]));
//! let b = tape.constant(Tensor::from_rows(&[&[3.0], &[4.0]]));
//! let c = tape.matmul(a, b).unwrap();
//! let grads = tape.backward(c).unwrap();
//! assert_eq!(tape.value(c).item(), 11.0);
//! assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
//! assert!(grads.get(b).is_none());
//! ```
//!
//! Every operation checks its output for NaN/Inf and returns
//! [`Error::NonFinite`] instead of propagating it.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, Mask, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        scale: f64,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    Transpose(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    TileRows(Var),
    GatherRows {
        x: Var,
        indices: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// A tape is single-owner; independent forward passes use independent tapes.
pub struct Tape {
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A tape that never tracks gradients. Parameters become constants and
    /// no backward bookkeeping is kept.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let tracked = self.record;
        self.push_leaf(value, tracked)
    }

    /// Registers an untracked leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str, parents: &[Var]) -> Result<Var> {
        value.ensure_finite(name)?;
        let tracked = parents.iter().any(|p| self.nodes[p.0].tracked);
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul(a, b), "matmul", &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_t(self.value(b))?;
        self.push(v, Op::MatMulT(a, b), "matmul_t", &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        self.push(v, Op::Add(a, b), "add", &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        self.push(v, Op::Sub(a, b), "sub", &[a, b])
    }

    /// Adds a `1 × n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: xv.shape(),
                rhs: rv.shape(),
            });
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_slice_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(x, row), "add_row", &[x, row])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        self.push(v, Op::Mul(a, b), "mul", &[a, b])
    }

    /// Elementwise product with a constant tensor; the constant receives no
    /// gradient.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let v = self.value(a).hadamard(c)?;
        self.push(v, Op::MulConst(a, c.clone()), "mul_const", &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), "scale", &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), "relu", &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), "sigmoid", &[a])
    }

    /// Row-wise softmax of `scale · x`; masked entries are exactly zero.
    pub fn softmax_rows(&mut self, x: Var, scale: f64, mask: Option<&Mask>) -> Result<Var> {
        let v = self.value(x).softmax_rows(scale, mask)?;
        self.push(v, Op::Softmax { x, scale }, "softmax_rows", &[x])
    }

    /// Per-row layer normalisation with learned `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        for p in [gain, bias] {
            let pv = self.value(p);
            if pv.shape() != (1, cols) {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: xv.shape(),
                    rhs: pv.shape(),
                });
            }
        }
        let mut normalized = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let n = cols as f64;
        for r in 0..rows {
            let row = xv.row_slice(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (o, v) in normalized.row_slice_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = normalized.clone();
        for r in 0..rows {
            for ((o, gv), bv) in out.row_slice_mut(r).iter_mut().zip(g.data()).zip(b.data()) {
                *o = *o * gv + bv;
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        };
        self.push(out, op, "layer_norm", &[x, gain, bias])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transpose();
        self.push(v, Op::Transpose(x), "transpose", &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice_cols(start, len)?;
        self.push(v, Op::SliceCols { x, start }, "slice_cols", &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat_cols(&tensors)?;
        self.push(v, Op::ConcatCols(parts.to_vec()), "concat_cols", parts)
    }

    /// Repeats a `1 × n` row `times` times.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != 1 {
            return Err(Error::Dimension {
                op: "tile_rows",
                lhs: xv.shape(),
                rhs: (1, xv.cols()),
            });
        }
        let v = xv.gather_rows(&vec![0; times])?;
        self.push(v, Op::TileRows(x), "tile_rows", &[x])
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let v = self.value(x).gather_rows(indices)?;
        let op = Op::GatherRows {
            x,
            indices: indices.to_vec(),
        };
        self.push(v, op, "gather_rows", &[x])
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = self.value(x).reshape(rows, cols)?;
        self.push(v, Op::Reshape(x), "reshape", &[x])
    }

    /// Sum of all entries, as a `1 × 1` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), "sum", &[x])
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. `None` targets (padding) contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != targets.len() {
            return Err(Error::Argument(format!(
                "cross_entropy: {} logit rows but {} targets",
                lv.rows(),
                targets.len()
            )));
        }
        let mut loss = 0.0;
        let mut probs = Tensor::zeros(lv.rows(), lv.cols());
        for (r, t) in targets.iter().enumerate() {
            let row = lv.row_slice(r);
            let lse = log_sum_exp(row);
            for (p, v) in probs.row_slice_mut(r).iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
            if let Some(t) = *t {
                if t >= lv.cols() {
                    return Err(Error::Vocabulary {
                        id: t,
                        size: lv.cols(),
                    });
                }
                loss += lse - row[t];
            }
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push(Tensor::scalar(loss), op, "cross_entropy", &[logits])
    }

    /// Reverse pass from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.shape() != (1, 1) {
            return Err(Error::Dimension {
                op: "backward",
                lhs: out.shape(),
                rhs: (1, 1),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        if !self.nodes[output.0].tracked {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(Tensor::scalar(1.0));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, value: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.is_tracked(*a) {
                    self.accumulate(grads, *a, g.matmul_t(bv)?);
                }
                if self.is_tracked(*b) {
                    self.accumulate(grads, *b, av.t_matmul(g)?);
                }
            }
            Op::MatMulT(a, b) => {
                // c = a bᵀ: dA = g b, dB = gᵀ a
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.is_tracked(*a) {
                    self.accumulate(grads, *a, g.matmul(bv)?);
                }
                if self.is_tracked(*b) {
                    self.accumulate(grads, *b, g.t_matmul(av)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.is_tracked(*row) {
                    let mut acc = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (a, v) in acc.data_mut().iter_mut().zip(g.row_slice(r)) {
                            *a += v;
                        }
                    }
                    self.accumulate(grads, *row, acc);
                }
            }
            Op::Mul(a, b) => {
                if self.is_tracked(*a) {
                    self.accumulate(grads, *a, g.hadamard(self.value(*b))?);
                }
                if self.is_tracked(*b) {
                    self.accumulate(grads, *b, g.hadamard(self.value(*a))?);
                }
            }
            Op::MulConst(a, c) => self.accumulate(grads, *a, g.hadamard(c)?),
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::Relu(a) => {
                let gx = g.zip_map(self.value(*a), "relu'", |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                self.accumulate(grads, *a, gx);
            }
            Op::Sigmoid(a) => {
                let gx = g.zip_map(value, "sigmoid'", |gv, y| gv * y * (1.0 - y))?;
                self.accumulate(grads, *a, gx);
            }
            Op::Softmax { x, scale } => {
                let mut gx = Tensor::zeros(value.rows(), value.cols());
                for r in 0..value.rows() {
                    let y = value.row_slice(r);
                    let gy = g.row_slice(r);
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in gx.row_slice_mut(r).iter_mut().zip(y).zip(gy) {
                        *o = scale * yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let (rows, cols) = g.shape();
                if self.is_tracked(*x) {
                    let n = cols as f64;
                    let mut gx = Tensor::zeros(rows, cols);
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = g.row_slice(r);
                        let xh = normalized.row_slice(r);
                        for c in 0..cols {
                            dxhat[c] = gr[c] * gv.data()[c];
                        }
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let k = inv_std[r] / n;
                        for (c, o) in gx.row_slice_mut(r).iter_mut().enumerate() {
                            *o = k * (n * dxhat[c] - sum_d - xh[c] * sum_dx);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.is_tracked(*gain) || self.is_tracked(*bias) {
                    let mut dg = Tensor::zeros(1, cols);
                    let mut db = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        let gr = g.row_slice(r);
                        let xh = normalized.row_slice(r);
                        for c in 0..cols {
                            dg.data_mut()[c] += gr[c] * xh[c];
                            db.data_mut()[c] += gr[c];
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()),
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    gx.row_slice_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row_slice(r));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.is_tracked(*p) {
                        self.accumulate(grads, *p, g.slice_cols(start, w)?);
                    }
                    start += w;
                }
            }
            Op::TileRows(x) => {
                let mut acc = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.row_slice(r)) {
                        *a += v;
                    }
                }
                self.accumulate(grads, *x, acc);
            }
            Op::GatherRows { x, indices } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for (r, &i) in indices.iter().enumerate() {
                    for (o, v) in gx.row_slice_mut(i).iter_mut().zip(g.row_slice(r)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, g.reshape(xv.rows(), xv.cols())?);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, Tensor::full(xv.rows(), xv.cols(), g.item()));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let scale = g.item();
                let mut gx = Tensor::zeros(probs.rows(), probs.cols());
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for (o, p) in gx.row_slice_mut(r).iter_mut().zip(probs.row_slice(r)) {
                            *o = scale * p;
                        }
                        gx.row_slice_mut(r)[t] -= scale;
                    }
                }
                self.accumulate(grads, *logits, gx);
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a tracked variable, or `None` if it does not influence
    /// the output or was never tracked.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when none was materialised.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}

/// Denominator floor in [`grad_check`]'s relative error, so entries whose
/// true gradient is zero are judged on absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Largest relative discrepancy between reverse-mode gradients and central
/// differences `(f(p+ε) − f(p−ε)) / 2ε` over every entry of `params`.
///
/// The relative error of one entry is `|a − n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    if !(1e-8..=1e-4).contains(&eps) {
        return Err(Error::Argument(format!("grad_check eps {eps} outside [1e-8, 1e-4]")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).item();
    if !value.is_finite() {
        return Err(Error::Numeric("grad_check: f is not finite".into()));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.get_or_zeros(*v, p.shape()))
        .collect();

    let eval = |shifted: &[Tensor]| -> Result<f64> {
        let mut t = Tape::inference();
        let vs: Vec<Var> = shifted.iter().map(|p| t.param(p.clone())).collect();
        let o = f(&mut t, &vs)?;
        let v = t.value(o).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric("grad_check: f is not finite".into()))
        }
    };

    let entries: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.len()).map(move |e| (pi, e)))
        .collect();
    let errors: Result<Vec<f64>> = entries
        .par_iter()
        .map(|&(pi, e)| {
            let mut shifted = params.to_vec();
            let base = params[pi].data()[e];
            shifted[pi].data_mut()[e] = base + eps;
            let plus = eval(&shifted)?;
            shifted[pi].data_mut()[e] = base - eps;
            let minus = eval(&shifted)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].data()[e];
            let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            Ok((a - numeric).abs() / denom)
        })
        .collect();
    Ok(errors?.into_iter().fold(0.0, f64::max))
}
