// SPDX-License-Identifier: Apache-2.0

use entalign_core::kb::EntityId;
use entalign_core::world::{generate_dataset, split, WorldSpec};

#[test]
fn prevalence_within_three_sigma() {
    let spec = WorldSpec::desk();
    let n = 2000;
    let samples = generate_dataset(&spec, n, 17).unwrap();
    for (e, def) in spec.entities.iter().enumerate() {
        let hits = samples
            .iter()
            .filter(|s| s.findings.iter().any(|f| f.entity == EntityId(e)))
            .count();
        let p = def.prevalence;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        let rate = hits as f64 / n as f64;
        assert!((rate - p).abs() <= 3.0 * sigma, "{}: {rate} vs {p}", def.name);
    }
}

#[test]
fn labels_and_masks_agree() {
    let spec = WorldSpec::desk();
    for s in generate_dataset(&spec, 500, 3).unwrap() {
        for (e, (&label, mask)) in s.labels.iter().zip(&s.masks).enumerate() {
            assert_eq!(label, mask.is_some(), "sample {} entity {e}", s.index);
            if let Some(m) = mask {
                assert_eq!(m.len(), spec.canvas * spec.canvas);
                assert!(m.contains(&true));
            }
            let drawn = s.findings.iter().any(|f| f.entity == EntityId(e) && f.drawn);
            assert_eq!(label, drawn);
        }
    }
}

#[test]
fn unseen_entities_never_reach_training() {
    let spec = WorldSpec::desk();
    let kb = spec.knowledge_base().unwrap();
    let samples = generate_dataset(&spec, 2000, 9).unwrap();
    let hold: Vec<bool> = samples.iter().map(|s| s.involves_unseen(&kb)).collect();
    let sp = split(samples.len(), &hold, [0.6, 0.2, 0.2], 9).unwrap();
    let unseen = kb.unseen();
    for &i in sp.train.iter().chain(&sp.val) {
        let s = &samples[i];
        assert!(unseen.iter().all(|u| !s.labels[u.0]));
        assert!(s.triplets.iter().all(|t| !unseen.contains(&t.entity)));
    }
    assert!(sp.test.iter().any(|&i| unseen.iter().any(|u| samples[i].labels[u.0])));
}

#[test]
fn samples_depend_only_on_seed_and_index() {
    let spec = WorldSpec::desk();
    let a = generate_dataset(&spec, 40, 2).unwrap();
    let b = generate_dataset(&spec, 80, 2).unwrap();
    assert_eq!(a[..], b[..40]);
    assert_ne!(a, generate_dataset(&spec, 40, 3).unwrap());
}
