// SPDX-License-Identifier: Apache-2.0

//! Scoring and grounding with a trained model, and the evaluation report.

use std::fmt::Write as _;
use std::path::Path;

use entalign_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{append_zero_shot_query, extract_heatmap, FusionOutput};
use crate::image::{Heatmap, Image};
use crate::kb::{EntityId, EntityQuery, KnowledgeBase, QueryText, TextEmbedder};
use crate::metrics::{
    auc, detection_pr_from_heatmaps, dice_iou_best_threshold, f1_acc_at_best_threshold,
    pointing_game,
};
use crate::model::Model;
use crate::world::Sample;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Score and min-max normalised heatmap for one image and query.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub score: f64,
    pub heatmap: Heatmap,
}

/// A trained model with the vocabulary it was trained against.
#[derive(Clone, Debug)]
pub struct Predictor<'a> {
    pub model: &'a Model,
    pub kb: &'a KnowledgeBase,
    pub embedder: &'a TextEmbedder,
    /// How seen entities were embedded during training.
    pub text: QueryText,
    queries: Tensor,
}

impl<'a> Predictor<'a> {
    pub fn new(
        model: &'a Model,
        kb: &'a KnowledgeBase,
        embedder: &'a TextEmbedder,
        text: QueryText,
    ) -> Result<Self> {
        let queries = embedder.query_matrix(kb, text)?;
        Ok(Self {
            model,
            kb,
            embedder,
            text,
            queries,
        })
    }

    /// The seen-entity query matrix.
    pub fn queries(&self) -> &Tensor {
        &self.queries
    }

    /// Query matrix and row for `query`. Seen entities use their own row;
    /// anything else is appended as an extra query, embedded from `text`.
    pub fn resolve(&self, query: &EntityQuery, text: QueryText) -> Result<(Tensor, usize)> {
        if let EntityQuery::Known(id) = query {
            if self.kb.entity(*id).is_none() {
                return Err(Error::UnknownEntity(format!("#{}", id.0)));
            }
            if let Some(q) = self.kb.query_index(*id) {
                return Ok((self.queries.clone(), q));
            }
        }
        let e = self.embedder.embed_entity(query, self.kb, text)?;
        Ok((append_zero_shot_query(&self.queries, &e)?, self.queries.shape()[0]))
    }

    /// Raw outputs for a batch of images against a query matrix.
    pub fn outputs(&self, images: &[&Image], queries: &Tensor) -> Result<Vec<FusionOutput>> {
        self.model.infer(images, queries)
    }

    fn heatmap(&self, out: &FusionOutput, row: usize, image: &Image) -> Result<Heatmap> {
        extract_heatmap(out, row, self.model.grid(), image.height(), image.width())
    }

    /// Predictions of one query over a batch of images.
    pub fn predict(
        &self,
        images: &[&Image],
        query: &EntityQuery,
        text: QueryText,
    ) -> Result<Vec<Prediction>> {
        let (q, row) = self.resolve(query, text)?;
        let outs = self.outputs(images, &q)?;
        outs.iter()
            .zip(images)
            .map(|(o, im)| {
                Ok(Prediction {
                    score: sigmoid(o.exist_logits[row]),
                    heatmap: self.heatmap(o, row, im)?.min_max_normalized(),
                })
            })
            .collect()
    }

    /// Existence probability of `query` in `image`.
    pub fn classify(&self, image: &Image, query: &EntityQuery) -> Result<f64> {
        Ok(self.predict(&[image], query, self.text)?[0].score)
    }

    /// Normalised grounding heatmap of `query` over `image`.
    pub fn ground(&self, image: &Image, query: &EntityQuery) -> Result<Heatmap> {
        Ok(self.predict(&[image], query, self.text)?.remove(0).heatmap)
    }
}

/// One record of an evaluation report.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: &'static str,
    pub entity: String,
    /// `seen`, or for extra queries `description` / `name`.
    pub query: &'static str,
    pub value: f64,
    pub n: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
}

impl EvalReport {
    pub const HEADER: &'static str = "metric,entity,query,value,n";

    pub fn get(&self, metric: &str, entity: &str, query: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.entity == entity && r.query == query)
            .map(|r| r.value)
    }

    /// Comma-separated records, one per line, with a header.
    pub fn to_records(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.9},{}",
                r.metric, r.entity, r.query, r.value, r.n
            );
        }
        out
    }

    /// Fixed-width table of the main metrics.
    pub fn summary(&self) -> String {
        let cols = ["auc", "f1", "acc", "pointing", "dice", "iou", "det_precision", "det_recall"];
        let mut keys: Vec<(&str, &str)> = Vec::new();
        for r in &self.rows {
            if !keys.contains(&(r.entity.as_str(), r.query)) {
                keys.push((r.entity.as_str(), r.query));
            }
        }
        let mut out = format!("{:<16} {:<11}", "entity", "query");
        for c in cols {
            let _ = write!(out, " {c:>13}");
        }
        out.push('\n');
        for (e, q) in keys {
            let _ = write!(out, "{e:<16} {q:<11}");
            for c in cols {
                match self.get(c, e, q) {
                    Some(v) => {
                        let _ = write!(out, " {v:>13.4}");
                    }
                    None => {
                        let _ = write!(out, " {:>13}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub iou_threshold: f64,
    pub batch_size: usize,
    /// Also score entities outside the query set as extra queries.
    pub zero_shot: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            iou_threshold: 0.1,
            batch_size: 64,
            zero_shot: true,
        }
    }
}

/// Per-entity predictions over a sample list.
fn predict_all(
    p: &Predictor,
    samples: &[&Sample],
    query: &EntityQuery,
    text: QueryText,
    batch: usize,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        out.extend(p.predict(&images, query, text)?);
    }
    Ok(out)
}

fn entity_rows(
    rows: &mut Vec<MetricRow>,
    name: &str,
    query: &'static str,
    entity: EntityId,
    samples: &[&Sample],
    preds: &[Prediction],
    opts: &EvalOptions,
) -> Result<(Option<f64>, usize, usize)> {
    let mut push = |metric: &'static str, value: f64, n: usize| {
        rows.push(MetricRow {
            metric,
            entity: name.to_string(),
            query,
            value,
            n,
        })
    };
    let labels: Vec<bool> = samples.iter().map(|s| s.labels[entity.0]).collect();
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let n = samples.len();
    let a = auc(&scores, &labels).ok();
    if let Some(a) = a {
        push("auc", a, n);
    }
    let t = f1_acc_at_best_threshold(&scores, &labels)?;
    push("f1", t.f1, n);
    push("acc", t.acc, n);
    push("threshold", t.threshold, n);

    let (mut hits, mut dice, mut iou) = (0usize, 0.0, 0.0);
    let (mut maps, mut masks) = (Vec::new(), Vec::new());
    for (s, p) in samples.iter().zip(preds) {
        if let Some(mask) = &s.masks[entity.0] {
            hits += pointing_game(&p.heatmap, mask)? as usize;
            let seg = dice_iou_best_threshold(&p.heatmap, mask)?;
            dice += seg.dice;
            iou += seg.iou;
            maps.push(p.heatmap.clone());
            masks.push(mask.clone());
        }
    }
    let m = masks.len();
    if m > 0 {
        push("pointing", hits as f64 / m as f64, m);
        push("dice", dice / m as f64, m);
        push("iou", iou / m as f64, m);
        let det = detection_pr_from_heatmaps(&maps, &masks, opts.iou_threshold)?;
        push("det_precision", det.precision, m);
        push("det_recall", det.recall, m);
    }
    Ok((a, hits, m))
}

/// Classification and grounding metrics over `samples`.
///
/// Seen entities are scored from one pass with the trained query set.
/// Every other knowledge-base entity is scored as an extra query, once
/// from its description and once from its bare name.
pub fn evaluate(p: &Predictor, samples: &[&Sample], opts: &EvalOptions) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Invalid("nothing to evaluate".into()));
    }
    let kb = p.kb;
    let mut rows = Vec::new();
    // seen entities share a single pass
    let mut seen_preds: Vec<Vec<Prediction>> = vec![Vec::with_capacity(samples.len()); kb.num_queries()];
    for chunk in samples.chunks(opts.batch_size.max(1)) {
        let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        let outs = p.outputs(&images, p.queries())?;
        for (o, im) in outs.iter().zip(&images) {
            for (q, preds) in seen_preds.iter_mut().enumerate() {
                preds.push(Prediction {
                    score: sigmoid(o.exist_logits[q]),
                    heatmap: p.heatmap(o, q, im)?.min_max_normalized(),
                });
            }
        }
    }
    let (mut aucs, mut hits, mut total) = (Vec::new(), 0, 0);
    for (q, id) in kb.seen().into_iter().enumerate() {
        let name = kb.entity(id).expect("seen id").name.clone();
        let (a, h, m) = entity_rows(&mut rows, &name, "seen", id, samples, &seen_preds[q], opts)?;
        aucs.extend(a);
        hits += h;
        total += m;
    }
    if !aucs.is_empty() {
        rows.push(MetricRow {
            metric: "macro_auc",
            entity: "all".into(),
            query: "seen",
            value: aucs.iter().sum::<f64>() / aucs.len() as f64,
            n: aucs.len(),
        });
    }
    if total > 0 {
        rows.push(MetricRow {
            metric: "pointing",
            entity: "all".into(),
            query: "seen",
            value: hits as f64 / total as f64,
            n: total,
        });
    }
    if opts.zero_shot {
        for id in kb.unseen() {
            let name = kb.entity(id).expect("unseen id").name.clone();
            for (text, label) in [(QueryText::Description, "description"), (QueryText::Name, "name")] {
                let preds = predict_all(p, samples, &EntityQuery::Known(id), text, opts.batch_size)?;
                entity_rows(&mut rows, &name, label, id, samples, &preds, opts)?;
            }
        }
    }
    Ok(EvalReport { rows })
}

/// Writes `heatmap_<sample>_<entity>.pgm` for every sample and seen entity.
pub fn export_heatmaps(p: &Predictor, samples: &[&Sample], dir: &Path) -> Result<usize> {
    std::fs::create_dir_all(dir)?;
    let mut written = 0;
    for chunk in samples.chunks(64) {
        let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        let outs = p.outputs(&images, p.queries())?;
        for ((o, im), s) in outs.iter().zip(&images).zip(chunk) {
            for (q, id) in p.kb.seen().into_iter().enumerate() {
                let name = &p.kb.entity(id).expect("seen id").name;
                let h = p.heatmap(o, q, im)?.min_max_normalized();
                h.save_pgm(&dir.join(format!("heatmap_{:05}_{}.pgm", s.index, name.replace(' ', "_"))))?;
                written += 1;
            }
        }
    }
    Ok(written)
}
