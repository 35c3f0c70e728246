// SPDX-License-Identifier: Apache-2.0

use entalign_core::image::Image;
use entalign_core::model::{Model, ModelConfig};

fn blob(canvas: usize, cy: f64, cx: f64) -> Image {
    let mut data = vec![0.0; canvas * canvas];
    for y in 0..canvas {
        for x in 0..canvas {
            let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
            data[y * canvas + x] = (-d2 / 4.0).exp();
        }
    }
    Image::new(canvas, canvas, 1, data).unwrap()
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

#[test]
fn shifting_by_one_stride_moves_the_peak_one_cell() {
    let cfg = ModelConfig::desk();
    let (canvas, stride, grid) = (cfg.vision.image_size, cfg.vision.stride(), cfg.vision.grid());
    for seed in 0..3 {
        let model = Model::new(&cfg, seed).unwrap();
        for r in 1..grid - 1 {
            for c in 1..grid - 1 {
                let at = |r: usize, c: usize| {
                    let f = model
                        .vision
                        .encode_image(&model.store, &blob(canvas, (r * stride) as f64 + 4.0, (c * stride) as f64 + 4.0))
                        .unwrap();
                    argmax(&f.activation_norms())
                };
                let base = at(r, c);
                assert_eq!(at(r, c + 1), base + 1, "seed {seed} cell ({r},{c}) right");
                assert_eq!(at(r + 1, c), base + grid, "seed {seed} cell ({r},{c}) down");
            }
        }
    }
}
