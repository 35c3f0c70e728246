// SPDX-License-Identifier: Apache-2.0

//! Independent recomputations shared by the integration tests and the
//! acceptance target. Nothing here calls the library code it checks.

#![allow(dead_code)]

use entalign_autodiff::{Graph, Tensor};
use entalign_core::fusion::{extract_heatmap, FusionConfig, FusionDecoder, FusionOutput};
use entalign_core::kb::PositionId;
use entalign_core::metrics::{
    auc, binarize, dice_iou, dice_iou_best_threshold, f1_acc_at_best_threshold, segmentation_thresholds,
};
use entalign_core::image::Heatmap;
use entalign_core::params::ParamStore;
use entalign_core::parser::{parse_report, ExistLabel, Report, Triplet};
use entalign_core::training::{loss_cls, loss_loc, LocVariant, QueryTarget, Targets};
use entalign_core::world::WorldSpec;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Result of one acceptance-style check.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut impl Rng, scale: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * scale
}

// ---------------------------------------------------------------- losses

pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn bce_oracle(logits: &[f64], q: usize, targets: &[Targets]) -> f64 {
    let b = targets.len();
    let mut total = 0.0;
    for (bi, t) in targets.iter().enumerate() {
        let mut terms = Vec::new();
        for (qi, qt) in t.iter().enumerate() {
            let y = match qt.exist {
                Some(ExistLabel::Present) => 1.0,
                Some(ExistLabel::Absent) => 0.0,
                _ => continue,
            };
            let z = logits[bi * q + qi];
            terms.push(softplus(z) - y * z);
        }
        let n = terms.len().max(1) as f64;
        total += terms.iter().sum::<f64>() / (b as f64 * n);
    }
    total
}

pub type NegativeTable = Vec<Vec<Vec<PositionId>>>;

pub fn loc_oracle(
    positions: &[f64],
    q: usize,
    dt: usize,
    targets: &[Targets],
    bank: &[f64],
    negatives: &NegativeTable,
    variant: LocVariant,
) -> f64 {
    let b = targets.len();
    let dot = |bi: usize, qi: usize, p: usize| -> f64 {
        (0..dt)
            .map(|j| positions[(bi * q + qi) * dt + j] * bank[p * dt + j])
            .sum()
    };
    let mut total = 0.0;
    for (bi, t) in targets.iter().enumerate() {
        let mut terms = Vec::new();
        for (qi, qt) in t.iter().enumerate() {
            let Some(pos) = qt.position else { continue };
            let s0 = dot(bi, qi, pos.0);
            let others: Vec<f64> = negatives[bi][qi].iter().map(|n| dot(bi, qi, n.0)).collect();
            let hi = others.iter().copied().fold(s0, f64::max);
            let denom = (s0 - hi).exp() + others.iter().map(|s| (s - hi).exp()).sum::<f64>();
            terms.push(match variant {
                LocVariant::Log => -((s0 - hi) - denom.ln()),
                LocVariant::Literal => -(s0 - hi).exp() / denom,
            });
        }
        let n = terms.len().max(1) as f64;
        total += terms.iter().sum::<f64>() / (b as f64 * n);
    }
    total
}

/// A random loss instance: `B ≤ 3`, `|Q| ≤ 8`, `|P| ≤ 8`, `M ≤ 4`.
pub struct LossCase {
    pub b: usize,
    pub q: usize,
    pub p: usize,
    pub dt: usize,
    pub logits: Vec<f64>,
    pub positions: Vec<f64>,
    pub bank: Vec<f64>,
    pub targets: Vec<Targets>,
    pub negatives: NegativeTable,
}

pub fn loss_case(rng: &mut impl Rng) -> LossCase {
    let b = rng.random_range(1..=3);
    let q = rng.random_range(1..=8);
    let p = rng.random_range(2..=8);
    let m = rng.random_range(1..=(p - 1).min(4));
    let dt = rng.random_range(1..=6);
    let logits = (0..b * q).map(|_| normal(rng, 3.0)).collect();
    let positions = (0..b * q * dt).map(|_| normal(rng, 1.0)).collect();
    let bank = (0..p * dt).map(|_| normal(rng, 1.0)).collect();
    let mut targets = Vec::new();
    let mut negatives = Vec::new();
    for _ in 0..b {
        let mut t = Vec::new();
        let mut negs = Vec::new();
        for _ in 0..q {
            let exist = match rng.random_range(0..4) {
                0 => None,
                1 => Some(ExistLabel::Present),
                2 => Some(ExistLabel::Absent),
                _ => Some(ExistLabel::Uncertain),
            };
            let position = (exist == Some(ExistLabel::Present) && rng.random_bool(0.8))
                .then(|| PositionId(rng.random_range(0..p)));
            let mut others: Vec<PositionId> = (0..p)
                .filter(|&i| Some(PositionId(i)) != position)
                .map(PositionId)
                .collect();
            others.shuffle(rng);
            others.truncate(m);
            t.push(QueryTarget { exist, position });
            negs.push(others);
        }
        targets.push(t);
        negatives.push(negs);
    }
    LossCase {
        b,
        q,
        p,
        dt,
        logits,
        positions,
        bank,
        targets,
        negatives,
    }
}

pub fn library_cls(c: &LossCase) -> f64 {
    let mut g = Graph::new();
    let z = g.constant(Tensor::new(vec![c.b, c.q], c.logits.clone()).unwrap());
    let l = loss_cls(&mut g, z, &c.targets).unwrap();
    g.value(l).data()[0]
}

pub fn library_loc(c: &LossCase, variant: LocVariant) -> f64 {
    let mut g = Graph::new();
    let pos = g.constant(Tensor::new(vec![c.b, c.q, c.dt], c.positions.clone()).unwrap());
    let bank = Tensor::new(vec![c.p, c.dt], c.bank.clone()).unwrap();
    let l = loss_loc(&mut g, pos, &c.targets, &bank, variant, |b, q, _| {
        c.negatives[b][q].clone()
    })
    .unwrap();
    g.value(l).data()[0]
}

/// Hand values: BCE at logit 0 with label 1; literal and log position
/// loss with one negative and inner products 1 and 0.
#[allow(clippy::approx_constant)]
pub fn loss_hand_values() -> [(f64, f64); 3] {
    let present = vec![vec![QueryTarget {
        exist: Some(ExistLabel::Present),
        position: Some(PositionId(0)),
    }]];
    let cls = LossCase {
        b: 1,
        q: 1,
        p: 2,
        dt: 2,
        logits: vec![0.0],
        positions: vec![1.0, 0.0],
        bank: vec![1.0, 0.0, 0.0, 1.0],
        targets: present,
        negatives: vec![vec![vec![PositionId(1)]]],
    };
    [
        (library_cls(&cls), 0.693147),
        (library_loc(&cls, LocVariant::Literal), -0.731059),
        (library_loc(&cls, LocVariant::Log), 0.313262),
    ]
}

pub fn loss_oracle_check(instances: usize, seed: u64) -> Outcome {
    let mut r = rng(seed);
    let mut worst = 0.0_f64;
    for _ in 0..instances {
        let c = loss_case(&mut r);
        let cls = (library_cls(&c) - bce_oracle(&c.logits, c.q, &c.targets)).abs();
        worst = worst.max(cls);
        for v in [LocVariant::Log, LocVariant::Literal] {
            let o = loc_oracle(&c.positions, c.q, c.dt, &c.targets, &c.bank, &c.negatives, v);
            worst = worst.max((library_loc(&c, v) - o).abs());
        }
    }
    let hand = loss_hand_values();
    let hand_ok = hand.iter().all(|(got, want)| (got - want).abs() < 5e-7);
    Outcome::new(
        worst <= 1e-12 && hand_ok,
        format!(
            "{instances} instances, max |library - oracle| {worst:.2e}; hand values {:.6} {:.6} {:.6}",
            hand[0].0, hand[1].0, hand[2].0
        ),
    )
}

// ---------------------------------------------------------------- parser

/// Sentences covering every label, with and without a position, cycling
/// through entities, positions and template variants.
pub fn parser_corpus(spec: &WorldSpec, n: usize) -> Vec<(Triplet, String)> {
    let kb = spec.knowledge_base().unwrap();
    let grammar = spec.grammar(&kb).unwrap();
    let entities = grammar.entities();
    let positions = grammar.positions();
    (0..n)
        .map(|i| {
            let t = Triplet {
                entity: entities[i % entities.len()],
                position: if (i / 3) % 2 == 0 {
                    positions[(i / 6) % positions.len()]
                } else {
                    grammar.unspecified()
                },
                exist: ExistLabel::ALL[i % 3],
            };
            (t, grammar.emit(&t, i / 6).unwrap())
        })
        .collect()
}

pub fn parser_round_trip_check(sentences: usize) -> Outcome {
    let spec = WorldSpec::desk();
    let kb = spec.knowledge_base().unwrap();
    let grammar = spec.grammar(&kb).unwrap();
    let corpus = parser_corpus(&spec, sentences);
    let mut exact = 0;
    for (t, s) in &corpus {
        // through report text, so sentence splitting and punctuation count
        let report = Report::from_text(&Report::from_sentences([s]).to_text());
        if parse_report(&report, &grammar) == vec![*t] && grammar.extract(s) == vec![*t] {
            exact += 1;
        }
    }
    let empty = parse_report(&Report::from_sentences(Vec::<String>::new()), &grammar).is_empty()
        && parse_report(&Report::from_text(""), &grammar).is_empty();
    let mut cells = std::collections::BTreeSet::new();
    for (t, _) in &corpus {
        cells.insert((t.exist, t.position == grammar.unspecified()));
    }
    Outcome::new(
        exact == corpus.len() && empty && cells.len() == 6,
        format!(
            "{exact}/{} sentences recovered exactly, {} label/position cells, empty report {}",
            corpus.len(),
            cells.len(),
            if empty { "empty" } else { "NOT empty" }
        ),
    )
}

// --------------------------------------------------------------- metrics

pub fn auc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Scores on a coarse grid so that ties occur; both classes present.
pub fn scored_instance(rng: &mut impl Rng, n: usize) -> (Vec<f64>, Vec<bool>) {
    loop {
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..12) as f64 / 11.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if labels.contains(&true) && labels.contains(&false) {
            return (scores, labels);
        }
    }
}

/// Dice and IoU of `values >= t` against `mask` by pixel counting.
pub fn pixel_count_dice_iou(values: &[f64], mask: &[bool], t: f64) -> (f64, f64) {
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for (&v, &m) in values.iter().zip(mask) {
        let hit = v >= t;
        if hit && m {
            tp += 1;
        } else if hit {
            fp += 1;
        } else if m {
            fne += 1;
        }
    }
    if tp + fp + fne == 0 {
        return (1.0, 1.0);
    }
    (
        (2 * tp) as f64 / (2 * tp + fp + fne) as f64,
        tp as f64 / (tp + fp + fne) as f64,
    )
}

/// Best F1 over every distinct way of cutting the sorted scores, and the
/// accuracy of the lowest cut reaching it.
pub fn brute_force_f1(scores: &[f64], labels: &[bool]) -> (f64, f64) {
    let mut cuts: Vec<f64> = scores.to_vec();
    cuts.push(f64::INFINITY);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut best = (-1.0, 0.0);
    for t in cuts {
        let (mut tp, mut fp, mut fne, mut tn) = (0.0, 0.0, 0.0, 0.0);
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= t, l) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fne += 1.0,
                (false, false) => tn += 1.0,
            }
        }
        let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fne) };
        if f1 > best.0 {
            best = (f1, (tp + tn) / scores.len() as f64);
        }
    }
    best
}

pub fn metric_oracle_check(seed: u64) -> Outcome {
    let mut r = rng(seed);
    let mut auc_exact = 0;
    for _ in 0..50 {
        let (s, l) = scored_instance(&mut r, 20);
        if auc(&s, &l).unwrap() == auc_pairs(&s, &l) {
            auc_exact += 1;
        }
    }
    let mut seg_exact = 0;
    for _ in 0..20 {
        let values: Vec<f64> = (0..64).map(|_| r.random_range(0.0..1.0)).collect();
        let mut mask: Vec<bool> = (0..64).map(|_| r.random_bool(0.3)).collect();
        mask[r.random_range(0..64)] = true;
        let mut all = true;
        let mut best = (-1.0, 0.0, 0.0);
        for t in segmentation_thresholds() {
            let want = pixel_count_dice_iou(&values, &mask, t);
            all &= dice_iou(&binarize(&values, t), &mask) == want;
            if want.0 > best.0 {
                best = (want.0, want.1, t);
            }
        }
        let hm = Heatmap {
            height: 8,
            width: 8,
            values,
        };
        let got = dice_iou_best_threshold(&hm, &mask).unwrap();
        all &= (got.dice, got.iou, got.threshold) == best;
        seg_exact += all as usize;
    }
    let mut f1_exact = 0;
    for _ in 0..50 {
        let (s, l) = scored_instance(&mut r, 10);
        let got = f1_acc_at_best_threshold(&s, &l).unwrap();
        if (got.f1, got.acc) == brute_force_f1(&s, &l) {
            f1_exact += 1;
        }
    }
    Outcome::new(
        auc_exact == 50 && seg_exact == 20 && f1_exact == 50,
        format!("auc {auc_exact}/50, dice/iou {seg_exact}/20 (every threshold), f1 {f1_exact}/50 exact"),
    )
}

// ---------------------------------------------------------------- fusion

pub fn small_fusion(self_attention: bool, seed: u64) -> (FusionDecoder, ParamStore) {
    let config = FusionConfig {
        self_attention,
        ..FusionConfig::desk()
    };
    let mut store = ParamStore::new();
    let dec = FusionDecoder::new(config, &mut store, &mut rng(seed)).unwrap();
    (dec, store)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal(rng, 1.0)).collect()).unwrap()
}

/// Largest deviation of any attention row sum from 1.
pub fn max_row_sum_error(outs: &[FusionOutput]) -> f64 {
    let mut worst = 0.0_f64;
    for o in outs {
        for a in &o.attn_maps {
            let n = a.shape()[2];
            for row in a.data().chunks(n) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    worst
}

/// Whether `b` is `a` with query rows permuted by `perm` (row `i` of the
/// permuted input is row `perm[i]` of the original), compared bitwise.
pub fn permuted_bitwise(a: &FusionOutput, b: &FusionOutput, perm: &[usize]) -> bool {
    let nq = perm.len();
    for (i, &src) in perm.iter().enumerate() {
        if a.exist_logits[src].to_bits() != b.exist_logits[i].to_bits() {
            return false;
        }
        if a.positions.row(src).iter().zip(b.positions.row(i)).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return false;
        }
        for (la, lb) in a.attn_maps.iter().zip(&b.attn_maps) {
            let (heads, n) = (la.shape()[0], la.shape()[2]);
            for h in 0..heads {
                let ra = &la.data()[(h * nq + src) * n..(h * nq + src + 1) * n];
                let rb = &lb.data()[(h * nq + i) * n..(h * nq + i + 1) * n];
                if ra.iter().zip(rb).any(|(x, y)| x.to_bits() != y.to_bits()) {
                    return false;
                }
            }
        }
    }
    true
}

/// One layer, one head, one query whose attention over a 4×4 grid is the
/// patch index; expected 32×32 map filled block by block.
pub fn block_layout_case() -> (FusionOutput, Vec<f64>) {
    let coarse: Vec<f64> = (0..16).map(|i| i as f64).collect();
    let out = FusionOutput {
        exist_logits: vec![0.0],
        positions: Tensor::zeros(&[1, 1]),
        attn_maps: vec![Tensor::new(vec![1, 1, 16], coarse).unwrap()],
    };
    let mut expected = vec![f64::NAN; 32 * 32];
    for pr in 0..4 {
        for pc in 0..4 {
            for dy in 0..8 {
                for dx in 0..8 {
                    expected[(pr * 8 + dy) * 32 + pc * 8 + dx] = (pr * 4 + pc) as f64;
                }
            }
        }
    }
    (out, expected)
}

pub fn fusion_invariants_check(seed: u64) -> Outcome {
    let mut r = rng(seed);
    let (dec, store) = small_fusion(true, seed);
    let c = dec.config().clone();
    let memory = random_tensor(&[3, c.patches, c.d], &mut r);
    let queries = random_tensor(&[7, c.d_text], &mut r);
    let base = dec.fuse(&store, &memory, &queries).unwrap();
    let row_err = max_row_sum_error(&base);

    let mut perm: Vec<usize> = (0..7).collect();
    let mut equivariant = true;
    for _ in 0..5 {
        perm.shuffle(&mut r);
        let mut rows = Vec::new();
        for &i in &perm {
            rows.extend_from_slice(queries.row(i));
        }
        let pq = Tensor::matrix(7, c.d_text, rows).unwrap();
        let out = dec.fuse(&store, &memory, &pq).unwrap();
        equivariant &= base.iter().zip(&out).all(|(a, b)| permuted_bitwise(a, b, &perm));
    }

    let (case, expected) = block_layout_case();
    let hm = extract_heatmap(&case, 0, (4, 4), 32, 32).unwrap();
    let layout = hm.values == expected;

    Outcome::new(
        row_err <= 1e-9 && equivariant && layout,
        format!(
            "max |row sum - 1| {row_err:.2e}, permutation equivariance {}, 4x4 to 32x32 layout {}",
            if equivariant { "bitwise" } else { "BROKEN" },
            if layout { "exact" } else { "WRONG" }
        ),
    )
}
