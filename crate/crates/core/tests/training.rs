// SPDX-License-Identifier: Apache-2.0

mod common;

use common::*;
use entalign_autodiff::{Graph, Tensor};
use entalign_core::config::RunConfig;
use entalign_core::kb::QueryText;
use entalign_core::model::Model;
use entalign_core::parser::{parse_report, ExistLabel};
use entalign_core::training::{batch_losses, batch_step, loss_cls, targets_from_triplets, train, AdamW, Example};
use entalign_core::world::generate_dataset;

struct Setup {
    cfg: RunConfig,
    examples: Vec<Example>,
    queries: Tensor,
    bank: Tensor,
}

fn setup(n: usize) -> Setup {
    let cfg = RunConfig::desk();
    let kb = cfg.knowledge_base().unwrap();
    let grammar = cfg.grammar(&kb).unwrap();
    let examples = generate_dataset(&cfg.world, n, 1)
        .unwrap()
        .into_iter()
        .filter(|s| !s.involves_unseen(&kb))
        .map(|s| Example {
            index: s.index,
            targets: targets_from_triplets(&parse_report(&s.report, &grammar), &kb),
            image: s.image,
        })
        .collect();
    Setup {
        queries: cfg.embedder.query_matrix(&kb, QueryText::Description).unwrap(),
        bank: cfg.embedder.position_bank(&kb).unwrap(),
        cfg,
        examples,
    }
}

fn grads(model: &Model, s: &Setup, alpha_loc: f64, alpha_cls: f64) -> Vec<Tensor> {
    let mut t = s.cfg.train.clone();
    t.alpha_loc = alpha_loc;
    t.alpha_cls = alpha_cls;
    let batch: Vec<&Example> = s.examples.iter().collect();
    let r = batch_step(model, &batch, &s.queries, &s.bank, &t, 0, 0).unwrap();
    r.params
        .0
        .iter()
        .zip(model.store.tensors())
        .map(|(&v, p)| r.graph.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect()
}

#[test]
fn zero_alpha_loc_gives_zero_position_head_gradient() {
    let s = setup(12);
    let model = Model::new(&s.cfg.model, 0).unwrap();
    let g = grads(&model, &s, 0.0, 1.0);
    for id in model.fusion.position_head_params() {
        assert!(g[id.0].data().iter().all(|&x| x == 0.0), "{}", model.store.name(id));
    }
    let g = grads(&model, &s, 1.0, 1.0);
    let [_, _, w, _] = model.fusion.position_head_params();
    assert!(g[w.0].data().iter().any(|&x| x != 0.0));
}

#[test]
fn total_gradient_is_weighted_sum_of_parts() {
    let s = setup(8);
    let model = Model::new(&s.cfg.model, 2).unwrap();
    let loc = grads(&model, &s, 1.0, 0.0);
    let cls = grads(&model, &s, 0.0, 1.0);
    let both = grads(&model, &s, 0.7, 1.9);
    for ((a, b), c) in loc.iter().zip(&cls).zip(&both) {
        for ((x, y), z) in a.data().iter().zip(b.data()).zip(c.data()) {
            let want = 0.7 * x + 1.9 * y;
            assert!((z - want).abs() <= 1e-10 * want.abs().max(1e-6), "{z} vs {want}");
        }
    }
}

#[test]
fn unmentioned_logits_do_not_touch_the_loss() {
    let mut r = rng(6);
    for _ in 0..100 {
        let c = loss_case(&mut r);
        let before = library_cls(&c);
        let mut logits = c.logits.clone();
        for (b, t) in c.targets.iter().enumerate() {
            for (q, qt) in t.iter().enumerate() {
                if !matches!(qt.exist, Some(ExistLabel::Present | ExistLabel::Absent)) {
                    logits[b * c.q + q] += normal(&mut r, 50.0);
                }
            }
        }
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(vec![c.b, c.q], logits).unwrap());
        let l = loss_cls(&mut g, z, &c.targets).unwrap();
        assert_eq!(g.value(l).data()[0].to_bits(), before.to_bits());
    }
}

#[test]
fn small_step_descends() {
    let s = setup(8);
    let mut model = Model::new(&s.cfg.model, 5).unwrap();
    let batch: Vec<&Example> = s.examples.iter().collect();
    let t = &s.cfg.train;
    let loss = |m: &Model| {
        let mut g = Graph::new();
        let p = m.store.bind(&mut g, false);
        let (_, _, total) = batch_losses(&mut g, &p, m, &batch, &s.queries, &s.bank, t, 0, 0).unwrap();
        g.value(total).data()[0]
    };
    let before = loss(&model);
    let r = batch_step(&model, &batch, &s.queries, &s.bank, t, 0, 0).unwrap();
    let gr: Vec<Option<&Tensor>> = r.params.0.iter().map(|&v| r.graph.grad(v)).collect();
    let mut opt = AdamW::new(&model.store);
    opt.update(&mut model.store, &gr, 1e-4, t);
    assert!(loss(&model) < before);
}

#[test]
fn training_is_bitwise_reproducible() {
    let s = setup(40);
    let mut t = s.cfg.train.clone();
    t.epochs = 2;
    t.batch_size = 8;
    let run = || {
        let mut model = Model::new(&s.cfg.model, 3).unwrap();
        let mut opt = AdamW::new(&model.store);
        let logs = train(&mut model, &mut opt, &s.examples, &s.queries, &s.bank, &t, 3, |_, _, _| Ok(())).unwrap();
        let losses: Vec<u64> = logs.iter().map(|l| l.total.to_bits()).collect();
        (model.store.tensors().to_vec(), opt, losses)
    };
    let (a, oa, la) = run();
    let (b, ob, lb) = run();
    assert_eq!(la, lb);
    assert_eq!(oa, ob);
    for (x, y) in a.iter().zip(&b) {
        assert!(x.data().iter().zip(y.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
}
