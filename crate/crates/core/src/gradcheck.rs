// SPDX-License-Identifier: Apache-2.0

//! End-to-end finite-difference check of the training loss.

use entalign_autodiff::{Graph, Tensor};
use rand_distr::{Distribution, Normal};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::kb::QueryText;
use crate::model::Model;
use crate::params::ParamId;
use crate::parser::parse_report;
use crate::rng::{purpose, stream};
use crate::training::{batch_losses, batch_step, targets_from_triplets, Example};
use crate::world::generate_dataset;

const JITTER: f64 = 0.01;

/// Gradient scale below which differences are measured against the scale
/// itself. One rounding step of an order-one loss, divided by `2·eps`, is
/// about 1e-11; attention key biases have an exact zero gradient.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn scaled_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    /// Coordinates compared.
    pub checked: usize,
    pub max_rel_error: f64,
}

/// Compares tape gradients of the total loss on a `batch`-sample batch
/// with central differences, on the `per_tensor` coordinates of each
/// parameter with the largest gradient magnitude.
///
/// Parameters are jittered first: zero-initialised biases put ReLU inputs
/// exactly on their kink for blank image regions, where central
/// differences average two one-sided slopes.
pub fn model_gradcheck(cfg: &RunConfig, batch: usize, per_tensor: usize, eps: f64) -> Result<Vec<ParamCheck>> {
    if batch == 0 || per_tensor == 0 {
        return Err(Error::Config("gradcheck needs a non-empty batch and coordinate set".into()));
    }
    let kb = cfg.knowledge_base()?;
    let grammar = cfg.grammar(&kb)?;
    let text = if cfg.train.entity_translation {
        QueryText::Description
    } else {
        QueryText::Name
    };
    let queries = cfg.embedder.query_matrix(&kb, text)?;
    let bank = cfg.embedder.position_bank(&kb)?;
    let examples: Vec<Example> = generate_dataset(&cfg.world, batch, cfg.seed)?
        .into_iter()
        .map(|s| Example {
            index: s.index,
            targets: targets_from_triplets(&parse_report(&s.report, &grammar), &kb),
            image: s.image,
        })
        .collect();
    let refs: Vec<&Example> = examples.iter().collect();
    let mut model = Model::new(&cfg.model, cfg.seed)?;
    let mut rng = stream(cfg.seed, &[purpose::INIT, 1]);
    let jitter = Normal::new(0.0, JITTER).expect("valid std");
    for i in 0..model.store.len() {
        for v in model.store.get_mut(ParamId(i)).data_mut() {
            *v += jitter.sample(&mut rng);
        }
    }

    let r = batch_step(&model, &refs, &queries, &bank, &cfg.train, cfg.seed, 0)?;
    let analytic: Vec<Tensor> = r
        .params
        .0
        .iter()
        .zip(model.store.tensors())
        .map(|(&v, t)| r.graph.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let loss = |model: &Model| -> Result<f64> {
        let mut g = Graph::new();
        let p = model.store.bind(&mut g, false);
        let (_, _, total) = batch_losses(&mut g, &p, model, &refs, &queries, &bank, &cfg.train, cfg.seed, 0)?;
        Ok(g.value(total).data()[0])
    };

    let mut out = Vec::with_capacity(analytic.len());
    for (i, grad) in analytic.iter().enumerate() {
        let id = ParamId(i);
        let mut coords: Vec<usize> = (0..grad.len()).collect();
        coords.sort_by(|&a, &b| grad.data()[b].abs().total_cmp(&grad.data()[a].abs()).then(a.cmp(&b)));
        coords.truncate(per_tensor);
        let mut worst = 0.0_f64;
        for &c in &coords {
            let orig = model.store.get(id).data()[c];
            model.store.get_mut(id).data_mut()[c] = orig + eps;
            let up = loss(&model)?;
            model.store.get_mut(id).data_mut()[c] = orig - eps;
            let down = loss(&model)?;
            model.store.get_mut(id).data_mut()[c] = orig;
            worst = worst.max(scaled_error(grad.data()[c], (up - down) / (2.0 * eps)));
        }
        out.push(ParamCheck {
            name: model.store.name(id).to_string(),
            checked: coords.len(),
            max_rel_error: worst,
        });
    }
    Ok(out)
}
