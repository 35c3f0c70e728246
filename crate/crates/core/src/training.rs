// SPDX-License-Identifier: Apache-2.0

//! Losses, negative sampling, AdamW and the training loop.

use std::time::Instant;

use entalign_autodiff::{Graph, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::kb::{KnowledgeBase, PositionId};
use crate::model::Model;
use crate::params::ParamStore;
use crate::parser::{ExistLabel, Triplet};
use crate::rng::{purpose, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocVariant {
    /// `−ln` of the positive's softmax share.
    Log,
    /// The negative softmax share itself, without a logarithm.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the position loss.
    pub alpha_loc: f64,
    /// Weight of the existence loss.
    pub alpha_cls: f64,
    /// Negative positions per contrastive term.
    pub negatives: usize,
    pub lr: f64,
    pub warmup_lr: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub loc_variant: LocVariant,
    /// Embed knowledge-base descriptions (true) or bare entity names.
    pub entity_translation: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            alpha_loc: 1.0,
            alpha_cls: 1.0,
            negatives: 4,
            lr: 3e-3,
            warmup_lr: 1e-5,
            warmup_epochs: 2,
            epochs: 30,
            batch_size: 32,
            loc_variant: LocVariant::Log,
            entity_translation: true,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
        }
    }

    pub fn paper() -> Self {
        Self {
            negatives: 7,
            lr: 1e-4,
            warmup_lr: 1e-5,
            warmup_epochs: 5,
            epochs: 60,
            batch_size: 32,
            ..Self::desk()
        }
    }

    pub fn validate(&self, num_positions: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha_loc >= 0.0 && self.alpha_cls >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if self.negatives == 0 {
            return bad("at least one negative position is required".into());
        }
        if self.negatives >= num_positions {
            return bad(format!(
                "{} negatives need more than {} positions",
                self.negatives, num_positions
            ));
        }
        if !(self.lr > 0.0 && self.warmup_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0 && self.weight_decay >= 0.0) {
            return bad("invalid Adam eps or weight decay".into());
        }
        Ok(())
    }

    /// Learning rate for `epoch`: linear from `warmup_lr` to `lr` over the
    /// warm-up epochs, then constant.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.warmup_epochs {
            self.lr
        } else {
            self.warmup_lr + (self.lr - self.warmup_lr) * epoch as f64 / self.warmup_epochs as f64
        }
    }
}

/// Supervision for one query of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueryTarget {
    /// `None` when the report does not mention the entity.
    pub exist: Option<ExistLabel>,
    /// Positive position for the contrastive loss.
    pub position: Option<PositionId>,
}

/// One target per seen query, in query order.
pub type Targets = Vec<QueryTarget>;

/// Builds targets from a parsed report. Only present findings with a
/// stated position supervise the position head.
pub fn targets_from_triplets(triplets: &[Triplet], kb: &KnowledgeBase) -> Targets {
    let mut out = vec![
        QueryTarget {
            exist: None,
            position: None,
        };
        kb.num_queries()
    ];
    for t in triplets {
        if let Some(q) = kb.query_index(t.entity) {
            out[q].exist = Some(t.exist);
            out[q].position = (t.exist == ExistLabel::Present && t.position != kb.unspecified())
                .then_some(t.position);
        }
    }
    out
}

/// `M` distinct positions other than `positive`, from the stream keyed by
/// `(seed, epoch, sample, query)`.
pub fn sample_negatives(
    seed: u64,
    epoch: usize,
    sample: usize,
    query: usize,
    positive: PositionId,
    num_positions: usize,
    m: usize,
) -> Vec<PositionId> {
    let mut rng = stream(
        seed,
        &[purpose::NEGATIVES, epoch as u64, sample as u64, query as u64],
    );
    rand::seq::index::sample(&mut rng, num_positions - 1, m)
        .into_iter()
        .map(|i| PositionId(if i >= positive.0 { i + 1 } else { i }))
        .collect()
}

/// Mean BCE per sample over queries labelled 1 or 0, averaged over the
/// batch. `logits` is `[B, Q]`. Exactly zero when nothing is supervised.
pub fn loss_cls(g: &mut Graph, logits: Var, targets: &[Targets]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != targets.len() {
        return Err(Error::Invalid(format!(
            "logits {s:?} for {} targets",
            targets.len()
        )));
    }
    let (b, nq) = (s[0], s[1]);
    let (mut idx, mut y, mut w) = (Vec::new(), Vec::new(), Vec::new());
    for (bi, t) in targets.iter().enumerate() {
        if t.len() != nq {
            return Err(Error::Invalid(format!("{} targets for {nq} queries", t.len())));
        }
        let picked: Vec<(usize, f64)> = t
            .iter()
            .enumerate()
            .filter_map(|(q, qt)| match qt.exist {
                Some(ExistLabel::Present) => Some((q, 1.0)),
                Some(ExistLabel::Absent) => Some((q, 0.0)),
                _ => None,
            })
            .collect();
        let weight = 1.0 / (b * picked.len().max(1)) as f64;
        for (q, label) in picked {
            idx.push(bi * nq + q);
            y.push(label);
            w.push(weight);
        }
    }
    if idx.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let k = idx.len();
    let z = g.gather(logits, idx.into(), &[k])?;
    let sp = g.softplus(z)?;
    let yv = g.constant(Tensor::vector(y)?);
    let yz = g.mul(yv, z)?;
    let per = g.sub(sp, yz)?;
    let wv = g.constant(Tensor::vector(w)?);
    let weighted = g.mul(per, wv)?;
    Ok(g.sum(weighted, None)?)
}

/// Contrastive position loss. `positions` is `[B, Q, d′]`, `bank` is
/// `[|P|, d′]`, and `negatives(b, q, positive)` supplies the negatives for
/// each contributing query. Scores are raw inner products.
pub fn loss_loc(
    g: &mut Graph,
    positions: Var,
    targets: &[Targets],
    bank: &Tensor,
    variant: LocVariant,
    mut negatives: impl FnMut(usize, usize, PositionId) -> Vec<PositionId>,
) -> Result<Var> {
    let s = g.shape(positions).to_vec();
    if s.len() != 3 || s[0] != targets.len() || bank.shape().len() != 2 || bank.shape()[1] != s[2]
    {
        return Err(Error::Invalid(format!(
            "positions {s:?} against bank {:?}",
            bank.shape()
        )));
    }
    let (b, nq, dt) = (s[0], s[1], s[2]);
    let np = bank.shape()[0];
    let mut rows = Vec::new();
    let mut cands: Vec<Vec<usize>> = Vec::new();
    let mut w = Vec::new();
    for (bi, t) in targets.iter().enumerate() {
        let contributing: Vec<(usize, PositionId)> = t
            .iter()
            .enumerate()
            .filter_map(|(q, qt)| qt.position.map(|p| (q, p)))
            .collect();
        let weight = 1.0 / (b * contributing.len().max(1)) as f64;
        for (q, pos) in contributing {
            if pos.0 >= np {
                return Err(Error::UnknownPosition(format!("#{}", pos.0)));
            }
            let neg = negatives(bi, q, pos);
            let mut c = vec![pos.0];
            c.extend(neg.iter().map(|p| p.0));
            if let Some(first) = cands.first() {
                if first.len() != c.len() {
                    return Err(Error::Invalid("negative counts differ".into()));
                }
            }
            rows.push(bi * nq + q);
            cands.push(c);
            w.push(weight);
        }
    }
    if rows.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let k = rows.len();
    let m1 = cands[0].len();
    let idx: Vec<usize> = rows
        .iter()
        .flat_map(|&r| (0..dt).map(move |j| r * dt + j))
        .collect();
    let p = g.gather(positions, idx.into(), &[k, 1, dt])?;
    // [K, d′, M+1]: column 0 is the positive.
    let mut cdata = Vec::with_capacity(k * dt * m1);
    for c in &cands {
        for j in 0..dt {
            for &pi in c {
                cdata.push(bank.data()[pi * dt + j]);
            }
        }
    }
    let cm = g.constant(Tensor::new(vec![k, dt, m1], cdata)?);
    let scores = g.matmul(p, cm)?;
    let scores = g.reshape(scores, &[k, m1])?;
    let first: Vec<usize> = (0..k).map(|i| i * m1).collect();
    let per = match variant {
        LocVariant::Log => {
            let ls = g.log_softmax(scores, 1)?;
            let lp = g.gather(ls, first.into(), &[k])?;
            g.scale(lp, -1.0)?
        }
        LocVariant::Literal => {
            let sm = g.softmax(scores, 1)?;
            let sp = g.gather(sm, first.into(), &[k])?;
            g.scale(sp, -1.0)?
        }
    };
    let wv = g.constant(Tensor::vector(w)?);
    let weighted = g.mul(per, wv)?;
    Ok(g.sum(weighted, None)?)
}

/// `α_loc · l_loc + α_cls · l_cls`.
pub fn total_loss(g: &mut Graph, l_cls: Var, l_loc: Var, cfg: &TrainConfig) -> Result<Var> {
    let a = g.scale(l_loc, cfg.alpha_loc)?;
    let b = g.scale(l_cls, cfg.alpha_cls)?;
    Ok(g.add(a, b)?)
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// One update. A missing gradient counts as zero.
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<&Tensor>],
        lr: f64,
        cfg: &TrainConfig,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (i, grad) in grads.iter().enumerate() {
            let p = store.get_mut(crate::params::ParamId(i)).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = grad.map_or(0.0, |g| g.data()[j]);
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * (mh / (vh.sqrt() + cfg.adam_eps) + cfg.weight_decay * p[j]);
            }
        }
    }
}

/// One training example with its precomputed targets.
#[derive(Clone, Debug)]
pub struct Example {
    /// Dataset index; keys the negative-sampling stream.
    pub index: usize,
    pub image: Image,
    pub targets: Targets,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_cls: f64,
    pub l_loc: f64,
    pub total: f64,
    /// Seconds since training started.
    pub wall: f64,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch,l_cls,l_loc,total,wall";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.9},{:.9},{:.9},{:.3}",
            self.epoch, self.l_cls, self.l_loc, self.total, self.wall
        )
    }
}

/// Scalar losses and gradients of one batch.
pub struct BatchResult {
    pub l_cls: f64,
    pub l_loc: f64,
    pub total: f64,
    pub graph: Graph,
    pub params: crate::params::Bound,
}

/// Existence, position and total loss of one batch on `g`.
#[allow(clippy::too_many_arguments)]
pub fn batch_losses(
    g: &mut Graph,
    p: &crate::params::Bound,
    model: &Model,
    batch: &[&Example],
    queries: &Tensor,
    bank: &Tensor,
    cfg: &TrainConfig,
    seed: u64,
    epoch: usize,
) -> Result<(Var, Var, Var)> {
    let images: Vec<&Image> = batch.iter().map(|e| &e.image).collect();
    let vars = model.forward(g, p, &images, queries)?;
    let targets: Vec<Targets> = batch.iter().map(|e| e.targets.clone()).collect();
    let l_cls = loss_cls(g, vars.exist_logits, &targets)?;
    let np = bank.shape()[0];
    let l_loc = loss_loc(
        g,
        vars.positions,
        &targets,
        bank,
        cfg.loc_variant,
        |b, q, pos| sample_negatives(seed, epoch, batch[b].index, q, pos, np, cfg.negatives),
    )?;
    let total = total_loss(g, l_cls, l_loc, cfg)?;
    Ok((l_cls, l_loc, total))
}

/// Forward and backward on one batch.
#[allow(clippy::too_many_arguments)]
pub fn batch_step(
    model: &Model,
    batch: &[&Example],
    queries: &Tensor,
    bank: &Tensor,
    cfg: &TrainConfig,
    seed: u64,
    epoch: usize,
) -> Result<BatchResult> {
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, true);
    let (l_cls, l_loc, total) = batch_losses(&mut g, &p, model, batch, queries, bank, cfg, seed, epoch)?;
    let (vc, vl, vt) = (
        g.value(l_cls).data()[0],
        g.value(l_loc).data()[0],
        g.value(total).data()[0],
    );
    g.backward(total)?;
    Ok(BatchResult {
        l_cls: vc,
        l_loc: vl,
        total: vt,
        graph: g,
        params: p,
    })
}

/// Trains `model` in place. `on_epoch` runs after every epoch.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &mut Model,
    optimizer: &mut AdamW,
    examples: &[Example],
    queries: &Tensor,
    bank: &Tensor,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog, &Model, &AdamW) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    if examples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    cfg.validate(bank.shape()[0])?;
    let start = Instant::now();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut stream(seed, &[purpose::SHUFFLE, epoch as u64]));
        let lr = cfg.lr_at(epoch);
        let (mut sc, mut sl, mut st) = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let r = batch_step(model, &batch, queries, bank, cfg, seed, epoch)?;
            let grads: Vec<Option<&Tensor>> = r.params.0.iter().map(|&v| r.graph.grad(v)).collect();
            optimizer.update(&mut model.store, &grads, lr, cfg);
            sc += r.l_cls;
            sl += r.l_loc;
            st += r.total;
            batches += 1;
        }
        let n = batches as f64;
        let log = EpochLog {
            epoch,
            l_cls: sc / n,
            l_loc: sl / n,
            total: st / n,
            wall: start.elapsed().as_secs_f64(),
        };
        on_epoch(&log, model, optimizer)?;
        logs.push(log);
    }
    Ok(logs)
}
