// SPDX-License-Identifier: Apache-2.0

//! Central finite-difference verification of tape gradients.

use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var, GATHER_ZERO};
use crate::tensor::Tensor;

pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Compares the tape gradient of scalar `f` at `x` with central differences.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let analytic = analytic_grad(&f, x)?;
    let mut worst = 0.0_f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Gradient of `f` at `x` from one backward sweep.
pub fn analytic_grad<F>(f: &F, x: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    Ok(g.grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape())))
}

/// Deterministic values in (-1, 1) for check fixtures.
pub fn fixture(shape: &[usize], salt: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| (1.618 * i as f64 + 0.731 * salt as f64 + 0.25).sin() * 0.95)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("fixture length")
}

/// Weighted sum so every output coordinate carries a distinct gradient.
pub fn weighted_sum(g: &mut Graph, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| 0.3 + 0.17 * i as f64).collect())?;
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    g.sum(p, None)
}

/// A differentiable operation wrapped into a scalar function of one input.
pub struct OpCase {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub f: fn(&mut Graph, Var) -> Result<Var>,
}

/// One case per differentiable operation.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "add",
            shape: vec![2, 3],
            f: |g, x| {
                let b = g.constant(fixture(&[3], 20));
                let y = g.add(x, b)?;
                weighted_sum(g, y)
            },
        },
        OpCase {
            name: "sub",
            shape: vec![2, 3],
            f: |g, x| {
                let b = g.constant(fixture(&[2, 3], 21));
                let y = g.sub(b, x)?;
                weighted_sum(g, y)
            },
        },
        OpCase {
            name: "mul",
            shape: vec![2, 3],
            f: |g, x| {
                let y = g.mul(x, x)?;
                weighted_sum(g, y)
            },
        },
        OpCase {
            name: "scale",
            shape: vec![4],
            f: |g, x| {
                let y = g.scale(x, -1.7)?;
                weighted_sum(g, y)
            },
        },
        OpCase {
            name: "sigmoid",
            shape: vec![5],
            f: |g, x| {
                let y = g.sigmoid(x)?;
                weighted_sum(g, y)
            },
        },
        OpCase {
            name: "log",
            shape: vec![5],
            f: |g, x| {
                let e = g.exp(x)?;
                let y = g.log(e)?;
                weighted_sum(g, y)
            },
        },
        OpCase {
            name: "exp",
            shape: vec![5],
            f: |g, x| {
                let y = g.exp(x)?;
                weighted_sum(g, y)
            },
        },
        OpCase {
            name: "relu",
            shape: vec![5],
            f: |g, x| {
                let y = g.relu(x)?;
                weighted_sum(g, y)
            },
        },
        OpCase {
            name: "softplus",
            shape: vec![5],
            f: |g, x| {
                let y = g.softplus(x)?;
                weighted_sum(g, y)
            },
        },
        OpCase {
            name: "matmul",
            shape: vec![2, 3, 4],
            f: |g, x| {
                let b = g.constant(fixture(&[4, 2], 22));
                let y = g.matmul(x, b)?;
                weighted_sum(g, y)
            },
        },
        OpCase {
            name: "bmm",
            shape: vec![2, 3, 4],
            f: |g, x| {
                let b = g.param(fixture(&[2, 4, 3], 23));
                let y = g.matmul(x, b)?;
                weighted_sum(g, y)
            },
        },
        OpCase {
            name: "transpose",
            shape: vec![2, 3, 4],
            f: |g, x| {
                let y = g.transpose(x)?;
                weighted_sum(g, y)
            },
        },
        OpCase {
            name: "reshape",
            shape: vec![2, 3],
            f: |g, x| {
                let y = g.reshape(x, &[3, 2])?;
                weighted_sum(g, y)
            },
        },
        OpCase {
            name: "slice",
            shape: vec![3, 5],
            f: |g, x| {
                let y = g.slice_last(x, 1, 3)?;
                weighted_sum(g, y)
            },
        },
        OpCase {
            name: "select_rows",
            shape: vec![4, 3],
            f: |g, x| {
                let y = g.select_rows(x, &[3, 0, 3])?;
                weighted_sum(g, y)
            },
        },
        OpCase {
            name: "concat",
            shape: vec![2, 3],
            f: |g, x| {
                let s = g.scale(x, 2.0)?;
                let y = g.concat_last(&[x, s])?;
                weighted_sum(g, y)
            },
        },
        OpCase {
            name: "softmax0",
            shape: vec![3, 4],
            f: |g, x| {
                let y = g.softmax(x, 0)?;
                weighted_sum(g, y)
            },
        },
        OpCase {
            name: "softmax1",
            shape: vec![3, 4],
            f: |g, x| {
                let y = g.softmax(x, 1)?;
                weighted_sum(g, y)
            },
        },
        OpCase {
            name: "log_softmax",
            shape: vec![3, 4],
            f: |g, x| {
                let y = g.log_softmax(x, 1)?;
                weighted_sum(g, y)
            },
        },
        OpCase {
            name: "sum_axis",
            shape: vec![3, 4],
            f: |g, x| {
                let y = g.sum(x, Some(0))?;
                weighted_sum(g, y)
            },
        },
        OpCase {
            name: "mean_axis",
            shape: vec![3, 4],
            f: |g, x| {
                let y = g.mean(x, Some(1))?;
                weighted_sum(g, y)
            },
        },
        OpCase {
            name: "max_axis",
            shape: vec![3, 4],
            f: |g, x| {
                let (y, _) = g.max(x, Some(1))?;
                weighted_sum(g, y)
            },
        },
        OpCase {
            name: "layer_norm",
            shape: vec![3, 6],
            f: |g, x| {
                let gain = g.param(fixture(&[6], 24));
                let bias = g.param(fixture(&[6], 25));
                let y = g.layer_norm(x, gain, bias, 1e-5)?;
                weighted_sum(g, y)
            },
        },
        OpCase {
            name: "gather",
            shape: vec![2, 3],
            f: |g, x| {
                let idx: Rc<[usize]> = vec![5, 0, GATHER_ZERO, 2, 2, 4].into();
                let y = g.gather(x, idx, &[3, 2])?;
                weighted_sum(g, y)
            },
        },
    ]
}

/// Maximum relative error of every [`op_cases`] entry.
pub fn check_ops(eps: f64) -> Result<Vec<(&'static str, f64)>> {
    op_cases()
        .into_iter()
        .map(|c| Ok((c.name, finite_diff_check(c.f, &fixture(&c.shape, 30), eps)?)))
        .collect()
}

fn evaluate<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = f(&mut g, xv)?;
    g.value(out)
        .item()
        .ok_or_else(|| TensorError::NonScalarLoss(g.shape(out).to_vec()))
}
