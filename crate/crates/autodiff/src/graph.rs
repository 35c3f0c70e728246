// SPDX-License-Identifier: Apache-2.0

//! Define-by-run computation tape.
//!
//! Every operation evaluates eagerly and, when any input requires a
//! gradient, records itself with enough saved state to apply its local
//! gradient rule. [`Graph::backward`] replays the records in reverse
//! insertion order (a valid reverse topological order, since inputs always
//! precede outputs) and accumulates into the `grad` of every leaf that
//! requires one. The consumed records are then dropped; leaves keep their
//! accumulated gradients until [`Graph::zero_grads`].
//!
//! Broadcasting is limited to the leading axes: for a binary op one operand
//! shape must equal the other's or be a proper suffix of it.

use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tensor::{argmax_first, Tensor};

/// Sentinel in a gather index meaning "emit zero".
pub const GATHER_ZERO: usize = usize::MAX;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Sigmoid,
    Log,
    Exp,
    Relu,
    /// `ln(1 + e^x)`, evaluated in the overflow-free form.
    Softplus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Sigmoid,
    Log,
    Exp,
    Relu,
    Softplus,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Consumed,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Unary(Var, Unary),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Gather { src: Var, index: Rc<[usize]> },
    ConcatLast(Vec<Var>),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Sum { x: Var, axis: Option<usize> },
    Mean { x: Var, axis: Option<usize> },
    Max { x: Var, argmax: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// The tape. Single-threaded; never share one across threads.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// Output shape of a leading-axis broadcast, or `None` when incompatible.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a == b || (b.len() < a.len() && a.ends_with(b)) {
        Some(a.to_vec())
    } else if a.len() < b.len() && b.ends_with(a) {
        Some(b.to_vec())
    } else if b == [1] {
        Some(a.to_vec())
    } else if a == [1] {
        Some(b.to_vec())
    } else {
        None
    }
}

/// Sum `g` (of length a multiple of `len`) down onto `len` entries.
fn fold_broadcast(g: &[f64], len: usize) -> Vec<f64> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut out = vec![0.0; len];
    for chunk in g.chunks_exact(len) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
fn mm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
fn mm_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
fn mm_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// (outer, axis length, inner) decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: Option<usize>) -> Vec<usize> {
    match axis {
        None => vec![1],
        Some(ax) => {
            let mut s: Vec<usize> = shape.to_vec();
            s.remove(ax);
            if s.is_empty() {
                s.push(1);
            }
            s
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that accumulates gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ── elementwise ──────────────────────────────────────────────────

    /// Dispatches one of the elementwise kinds. Binary kinds need `b`.
    pub fn elementwise(&mut self, kind: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || {
            b.ok_or_else(|| TensorError::Invalid(format!("{kind:?} needs a second operand")))
        };
        match kind {
            ElementwiseOp::Add => self.add(a, need_b()?),
            ElementwiseOp::Sub => self.sub(a, need_b()?),
            ElementwiseOp::Mul => self.mul(a, need_b()?),
            ElementwiseOp::Scale(c) => self.scale(a, c),
            ElementwiseOp::Sigmoid => self.sigmoid(a),
            ElementwiseOp::Log => self.log(a),
            ElementwiseOp::Exp => self.exp(a),
            ElementwiseOp::Relu => self.relu(a),
            ElementwiseOp::Softplus => self.softplus(a),
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(av.shape(), bv.shape()).ok_or_else(|| {
            TensorError::ShapeMismatch {
                op: name,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            }
        })?;
        let n: usize = shape.iter().product();
        let (ad, bd) = (av.data(), bv.data());
        let data: Vec<f64> = if ad.len() == n && bd.len() == n {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(ad[i % ad.len()], bd[i % bd.len()])).collect()
        };
        check_finite(name, &data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), make(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.nodes[a.0].value.map(|x| x * c);
        check_finite("scale", v.data())?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Scale(a, c), rg))
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let (name, v) = match kind {
            Unary::Sigmoid => ("sigmoid", x.map(sigmoid)),
            Unary::Log => {
                if let Some(&bad) = x.data().iter().find(|&&v| v <= 0.0) {
                    return Err(TensorError::LogNonPositive(bad));
                }
                ("log", x.map(f64::ln))
            }
            Unary::Exp => ("exp", x.map(f64::exp)),
            Unary::Relu => ("relu", x.map(|v| v.max(0.0))),
            Unary::Softplus => ("softplus", x.map(softplus)),
        };
        check_finite(name, v.data())?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Unary(a, kind), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Softplus)
    }

    // ── linear algebra ───────────────────────────────────────────────

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[.., m, k]`; `b` is either `[k, n]` (shared across the
    /// leading axes of `a`) or `[.., k, n]` with the same leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (av.shape(), bv.shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead = &sa[..sa.len() - 2];
        let shared = sb.len() == 2;
        if k != k2 || (!shared && &sb[..sb.len() - 2] != lead) {
            return Err(mismatch());
        }
        let batch: usize = lead.iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (av.data(), bv.data());
        for t in 0..batch {
            let bs = if shared { 0 } else { t * k * n };
            mm_acc(
                &ad[t * m * k..(t + 1) * m * k],
                &bd[bs..bs + k * n],
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
            );
        }
        check_finite("matmul", &out)?;
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let s = x.shape();
        if s.len() < 2 {
            return Err(TensorError::InvalidAxis {
                op: "transpose",
                axis: 1,
                rank: s.len(),
            });
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = x.len() / (r * c);
        let d = x.data();
        let mut out = vec![0.0; x.len()];
        for t in 0..batch {
            let o = t * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[o + j * r + i] = d[o + i * c + j];
                }
            }
        }
        let mut shape = s.to_vec();
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.nodes[a.0].value.reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// `out[i] = src[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    ///
    /// Covers slicing, row selection, im2col patch extraction and padding.
    pub fn gather(&mut self, src: Var, index: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let x = &self.nodes[src.0].value;
        let n: usize = shape.iter().product();
        if n != index.len() || shape.contains(&0) {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected: n,
                actual: index.len(),
            });
        }
        let d = x.data();
        let mut out = Vec::with_capacity(n);
        for &i in index.iter() {
            if i == GATHER_ZERO {
                out.push(0.0);
            } else if i < d.len() {
                out.push(d[i]);
            } else {
                return Err(TensorError::IndexOutOfRange {
                    index: i,
                    len: d.len(),
                });
            }
        }
        let rg = self.rg(src);
        Ok(self.push(
            Tensor::from_parts(shape.to_vec(), out),
            Op::Gather { src, index },
            rg,
        ))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let w = *s.last().expect("non-empty shape");
        if len == 0 || start + len > w {
            return Err(TensorError::Invalid(format!(
                "slice {start}..{} of last axis with extent {w}",
                start + len
            )));
        }
        let rows = self.value(a).len() / w;
        let index: Vec<usize> = (0..rows)
            .flat_map(|r| (start..start + len).map(move |c| r * w + c))
            .collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        self.gather(a, index.into(), &shape)
    }

    /// Selects rows of the `[rows, last]` view of `a`, giving `[picks.len(), last]`.
    pub fn select_rows(&mut self, a: Var, picks: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let w = *x.shape().last().expect("non-empty shape");
        let rows = x.len() / w;
        if let Some(&bad) = picks.iter().find(|&&r| r >= rows) {
            return Err(TensorError::IndexOutOfRange {
                index: bad,
                len: rows,
            });
        }
        let index: Vec<usize> = picks
            .iter()
            .flat_map(|&r| (0..w).map(move |c| r * w + c))
            .collect();
        self.gather(a, index.into(), &[picks.len(), w])
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let lead = {
            let s = self.shape(*first);
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_last",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::ConcatLast(parts.to_vec()),
            rg,
        ))
    }

    // ── normalisation ────────────────────────────────────────────────

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        let rank = self.shape(a).len();
        if axis >= rank {
            Err(TensorError::InvalidAxis { op, axis, rank })
        } else {
            Ok(())
        }
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let out = softmax_values(&self.nodes[a.0].value, axis, false);
        check_finite("softmax", &out)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x: a, axis }, rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", a, axis)?;
        let out = softmax_values(&self.nodes[a.0].value, axis, true);
        check_finite("log_softmax", &out)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LogSoftmax { x: a, axis },
            rg,
        ))
    }

    /// Normalises over the last axis, then applies `gain` and `bias` (both
    /// shaped like the last axis).
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::Invalid("layer_norm eps must be positive".into()));
        }
        let x = &self.nodes[a.0].value;
        let n = *x.shape().last().expect("non-empty shape");
        for p in [gain, bias] {
            if self.shape(p) != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: x.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let rows = x.len() / n;
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.len());
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        check_finite("layer_norm", &out)?;
        let shape = x.shape().to_vec();
        let rg = self.rg(a) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x: a,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ── reductions ───────────────────────────────────────────────────

    /// Sum, mean or max over one axis (removed from the shape) or over all
    /// values (`axis = None`, giving shape `[1]`).
    pub fn reduce(&mut self, kind: ReduceOp, a: Var, axis: Option<usize>) -> Result<Var> {
        match kind {
            ReduceOp::Sum => self.sum(a, axis),
            ReduceOp::Mean => self.mean(a, axis),
            ReduceOp::Max => self.max(a, axis).map(|(v, _)| v),
        }
    }

    fn reduce_sum_values(&self, a: Var, axis: Option<usize>) -> Result<(Vec<usize>, Vec<f64>)> {
        let x = self.value(a);
        match axis {
            None => Ok((vec![1], vec![x.sum()])),
            Some(ax) => {
                self.check_axis("reduce", a, ax)?;
                let (outer, len, inner) = split_axis(x.shape(), ax);
                let d = x.data();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..len {
                        let base = (o * len + j) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += d[base + i];
                        }
                    }
                }
                Ok((reduced_shape(x.shape(), axis), out))
            }
        }
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let (shape, out) = self.reduce_sum_values(a, axis)?;
        check_finite("sum", &out)?;
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Sum { x: a, axis }, rg))
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let (shape, mut out) = self.reduce_sum_values(a, axis)?;
        let count = match axis {
            None => self.value(a).len(),
            Some(ax) => self.shape(a)[ax],
        } as f64;
        out.iter_mut().for_each(|v| *v /= count);
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mean { x: a, axis }, rg))
    }

    /// Max over an axis (or everything) together with the flat input index
    /// of each maximum. Ties resolve to the lowest index.
    pub fn max(&mut self, a: Var, axis: Option<usize>) -> Result<(Var, Vec<usize>)> {
        let x = self.value(a);
        let (shape, vals, argmax) = match axis {
            None => {
                let (v, i) = argmax_first(x.data());
                (vec![1], vec![v], vec![i])
            }
            Some(ax) => {
                self.check_axis("max", a, ax)?;
                let (outer, len, inner) = split_axis(x.shape(), ax);
                let d = x.data();
                let mut vals = Vec::with_capacity(outer * inner);
                let mut idx = Vec::with_capacity(outer * inner);
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = (d[o * len * inner + i], o * len * inner + i);
                        for j in 1..len {
                            let f = (o * len + j) * inner + i;
                            if d[f] > best.0 {
                                best = (d[f], f);
                            }
                        }
                        vals.push(best.0);
                        idx.push(best.1);
                    }
                }
                (reduced_shape(x.shape(), axis), vals, idx)
            }
        };
        let rg = self.rg(a);
        let v = self.push(
            Tensor::from_parts(shape, vals),
            Op::Max {
                x: a,
                argmax: argmax.clone(),
            },
            rg,
        );
        Ok((v, argmax))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Gradients accumulate into every reachable leaf that requires one;
    /// calling twice without [`Graph::zero_grads`] sums the contributions.
    /// The op records between the leaves and `loss` are consumed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0];
        if !lv.value.is_scalar() {
            return Err(TensorError::NonScalarLoss(lv.value.shape().to_vec()));
        }
        if matches!(lv.op, Op::Consumed) {
            return Err(TensorError::TapeConsumed);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                let node = &mut self.nodes[id];
                let gt = Tensor::from_parts(node.value.shape().to_vec(), g);
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&gt)?,
                    None => node.grad = Some(gt),
                }
                continue;
            }
            self.propagate(id, &g, &mut grads)?;
        }
        for node in &mut self.nodes[..=loss.0] {
            if !matches!(node.op, Op::Leaf) {
                node.op = Op::Consumed;
            }
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            Op::Consumed => return Err(TensorError::TapeConsumed),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.rg(*a) {
                    let la = self.value(*a).len();
                    self.send(grads, *a, fold_broadcast(g, la));
                }
                if self.rg(*b) {
                    let lb = self.value(*b).len();
                    let mut gb = fold_broadcast(g, lb);
                    if sign < 0.0 {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    self.send(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let full: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| gv * bd[i % bd.len()])
                        .collect();
                    self.send(grads, *a, fold_broadcast(&full, ad.len()));
                }
                if self.rg(*b) {
                    let full: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| gv * ad[i % ad.len()])
                        .collect();
                    self.send(grads, *b, fold_broadcast(&full, bd.len()));
                }
            }
            Op::Scale(a, c) => {
                self.send(grads, *a, g.iter().map(|v| v * c).collect());
            }
            Op::Unary(a, kind) => {
                let x = self.value(*a).data();
                let d: Vec<f64> = match kind {
                    Unary::Sigmoid => g.iter().zip(y).map(|(gv, s)| gv * s * (1.0 - s)).collect(),
                    Unary::Log => g.iter().zip(x).map(|(gv, xv)| gv / xv).collect(),
                    Unary::Exp => g.iter().zip(y).map(|(gv, e)| gv * e).collect(),
                    Unary::Relu => g
                        .iter()
                        .zip(x)
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                    Unary::Softplus => g.iter().zip(x).map(|(gv, xv)| gv * sigmoid(*xv)).collect(),
                };
                self.send(grads, *a, d);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (sa, sb) = (av.shape(), bv.shape());
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let shared = sb.len() == 2;
                let batch = av.len() / (m * k);
                if self.rg(*a) {
                    let mut ga = vec![0.0; av.len()];
                    for t in 0..batch {
                        let bs = if shared { 0 } else { t * k * n };
                        mm_nt_acc(
                            &g[t * m * n..(t + 1) * m * n],
                            &bv.data()[bs..bs + k * n],
                            &mut ga[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.send(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; bv.len()];
                    for t in 0..batch {
                        let bs = if shared { 0 } else { t * k * n };
                        mm_tn_acc(
                            &av.data()[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &mut gb[bs..bs + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    self.send(grads, *b, gb);
                }
            }
            Op::Transpose(a) => {
                // y is [.., c, r]; send back as [.., r, c]
                let s = node.value.shape();
                let (c, r) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = g.len() / (r * c);
                let mut out = vec![0.0; g.len()];
                for t in 0..batch {
                    let o = t * r * c;
                    for i in 0..c {
                        for j in 0..r {
                            out[o + j * c + i] = g[o + i * r + j];
                        }
                    }
                }
                self.send(grads, *a, out);
            }
            Op::Reshape(a) => self.send(grads, *a, g.to_vec()),
            Op::Gather { src, index } => {
                let mut out = vec![0.0; self.value(*src).len()];
                for (gv, &i) in g.iter().zip(index.iter()) {
                    if i != GATHER_ZERO {
                        out[i] += gv;
                    }
                }
                self.send(grads, *src, out);
            }
            Op::ConcatLast(parts) => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|&p| *self.shape(p).last().unwrap())
                    .collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut outs: Vec<Vec<f64>> = widths
                    .iter()
                    .map(|&w| Vec::with_capacity(rows * w))
                    .collect();
                for r in 0..rows {
                    let mut off = r * total;
                    for (o, &w) in outs.iter_mut().zip(&widths) {
                        o.extend_from_slice(&g[off..off + w]);
                        off += w;
                    }
                }
                for (&p, o) in parts.iter().zip(outs) {
                    if self.rg(p) {
                        self.send(grads, p, o);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut out = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            out[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                self.send(grads, *x, out);
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut out = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let gs: f64 = (0..len).map(|j| g[at(j)]).sum();
                        for j in 0..len {
                            out[at(j)] = g[at(j)] - y[at(j)].exp() * gs;
                        }
                    }
                }
                self.send(grads, *x, out);
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let xs = self.shape(*x);
                let n = self.value(*x).len();
                let scale = if matches!(node.op, Op::Mean { .. }) {
                    1.0 / match axis {
                        None => n,
                        Some(ax) => xs[*ax],
                    } as f64
                } else {
                    1.0
                };
                let out = match axis {
                    None => vec![g[0] * scale; n],
                    Some(ax) => {
                        let (outer, len, inner) = split_axis(xs, *ax);
                        let mut out = vec![0.0; n];
                        for o in 0..outer {
                            for j in 0..len {
                                for i in 0..inner {
                                    out[(o * len + j) * inner + i] = g[o * inner + i] * scale;
                                }
                            }
                        }
                        out
                    }
                };
                self.send(grads, *x, out);
            }
            Op::Max { x, argmax } => {
                let mut out = vec![0.0; self.value(*x).len()];
                for (gv, &i) in g.iter().zip(argmax) {
                    out[i] += gv;
                }
                self.send(grads, *x, out);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = inv_std.len();
                let w = g.len() / n;
                let gd = self.value(*gain).data();
                if self.rg(*x) {
                    let mut out = vec![0.0; g.len()];
                    for r in 0..n {
                        let gr = &g[r * w..(r + 1) * w];
                        let hr = &xhat[r * w..(r + 1) * w];
                        let dh: Vec<f64> = gr.iter().zip(gd).map(|(a, b)| a * b).collect();
                        let m1 = dh.iter().sum::<f64>() / w as f64;
                        let m2 = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                        for j in 0..w {
                            out[r * w + j] = inv_std[r] * (dh[j] - m1 - hr[j] * m2);
                        }
                    }
                    self.send(grads, *x, out);
                }
                if self.rg(*gain) {
                    let gg = fold_broadcast(
                        &g.iter().zip(xhat).map(|(a, b)| a * b).collect::<Vec<_>>(),
                        w,
                    );
                    self.send(grads, *gain, gg);
                }
                if self.rg(*bias) {
                    self.send(grads, *bias, fold_broadcast(g, w));
                }
            }
        }
        Ok(())
    }
}

fn softmax_values(x: &Tensor, axis: usize, log: bool) -> Vec<f64> {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mx = (0..len).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..len).map(|j| (d[at(j)] - mx).exp()).sum();
            let lz = z.ln();
            for j in 0..len {
                out[at(j)] = if log {
                    d[at(j)] - mx - lz
                } else {
                    (d[at(j)] - mx).exp() / z
                };
            }
        }
    }
    out
}
