// SPDX-License-Identifier: Apache-2.0

mod common;

use common::*;
use entalign_autodiff::Tensor;
use entalign_core::fusion::{append_zero_shot_query, coarse_map, extract_heatmap, FusionOutput};

#[test]
fn rows_sum_to_one_equivariance_and_block_layout() {
    let o = fusion_invariants_check(3);
    assert!(o.passed, "{}", o.detail);
}

#[test]
fn heatmap_is_mean_over_layers_and_heads() {
    let mut r = rng(8);
    let (layers, heads, nq, n) = (3, 2, 4, 16);
    let maps: Vec<Tensor> = (0..layers)
        .map(|_| {
            let mut data = Vec::new();
            for _ in 0..heads * nq {
                let raw: Vec<f64> = (0..n).map(|_| normal(&mut r, 1.0).exp()).collect();
                let z: f64 = raw.iter().sum();
                data.extend(raw.iter().map(|v| v / z));
            }
            Tensor::new(vec![heads, nq, n], data).unwrap()
        })
        .collect();
    let out = FusionOutput {
        exist_logits: vec![0.0; nq],
        positions: Tensor::zeros(&[nq, 1]),
        attn_maps: maps.clone(),
    };
    for q in 0..nq {
        let mut want = vec![0.0; n];
        for (j, w) in want.iter_mut().enumerate() {
            let mut vals = Vec::new();
            for m in &maps {
                for h in 0..heads {
                    vals.push(m.data()[(h * nq + q) * n + j]);
                }
            }
            *w = vals.iter().sum::<f64>() / vals.len() as f64;
        }
        let got = coarse_map(&out, q).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
        let hm = extract_heatmap(&out, q, (4, 4), 32, 32).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(hm.values[y * 32 + x], got[(y / 8) * 4 + x / 8]);
            }
        }
    }
}

#[test]
fn zero_shot_row_leaves_seen_logits_without_self_attention() {
    let mut r = rng(9);
    for self_attention in [false, true] {
        let (dec, store) = small_fusion(self_attention, 2);
        let c = dec.config().clone();
        let memory = random_tensor(&[2, c.patches, c.d], &mut r);
        let seen = random_tensor(&[5, c.d_text], &mut r);
        let extra: Vec<f64> = (0..c.d_text).map(|_| normal(&mut r, 1.0)).collect();
        let with = append_zero_shot_query(&seen, &extra).unwrap();
        let a = dec.fuse(&store, &memory, &seen).unwrap();
        let b = dec.fuse(&store, &memory, &with).unwrap();
        let same = a.iter().zip(&b).all(|(x, y)| {
            x.exist_logits
                .iter()
                .zip(&y.exist_logits)
                .all(|(u, v)| u.to_bits() == v.to_bits())
        });
        if !self_attention {
            assert!(same);
        }
        assert_eq!(b[0].exist_logits.len(), 6);
    }
}

#[test]
fn fused_outputs_are_deterministic() {
    let mut r = rng(10);
    let (dec, store) = small_fusion(true, 4);
    let c = dec.config().clone();
    let memory = random_tensor(&[2, c.patches, c.d], &mut r);
    let q = random_tensor(&[3, c.d_text], &mut r);
    assert_eq!(dec.fuse(&store, &memory, &q).unwrap(), dec.fuse(&store, &memory, &q).unwrap());
}
