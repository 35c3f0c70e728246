// SPDX-License-Identifier: Apache-2.0

//! Strided convolutional encoder mapping an image to a grid of patch
//! features.

use std::rc::Rc;

use entalign_autodiff::{Graph, Tensor, Var, GATHER_ZERO};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::params::{kaiming, Bound, Linear, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisionConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Output channels of each 3×3 stride-2 convolution.
    pub channels: Vec<usize>,
    /// Feature dimension `d`.
    pub d: usize,
}

impl VisionConfig {
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            in_channels: 1,
            channels: vec![16, 32, 32],
            d: 32,
        }
    }

    pub fn stride(&self) -> usize {
        1 << self.channels.len()
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.stride()
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("encoder needs at least one non-empty layer".into()));
        }
        if self.in_channels == 0 || self.d == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.stride()) {
            return Err(Error::Config(format!(
                "image size {} not divisible by total stride {}",
                self.image_size,
                self.stride()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    in_hw: usize,
    cin: usize,
    /// im2col gather index for one image: `[out_hw², 9·cin]`.
    index: Rc<[usize]>,
}

impl Conv {
    fn out_hw(&self) -> usize {
        self.in_hw / 2
    }
}

fn im2col_index(hw: usize, cin: usize) -> Vec<usize> {
    let out = hw / 2;
    let mut idx = Vec::with_capacity(out * out * 9 * cin);
    for oy in 0..out {
        for ox in 0..out {
            for ky in 0..3 {
                for kx in 0..3 {
                    let y = (2 * oy + ky) as isize - 1;
                    let x = (2 * ox + kx) as isize - 1;
                    let inside = y >= 0 && x >= 0 && (y as usize) < hw && (x as usize) < hw;
                    for c in 0..cin {
                        idx.push(if inside {
                            (y as usize * hw + x as usize) * cin + c
                        } else {
                            GATHER_ZERO
                        });
                    }
                }
            }
        }
    }
    idx
}

/// Convolution stack followed by a linear map to `d`.
#[derive(Clone, Debug)]
pub struct VisionEncoder {
    config: VisionConfig,
    convs: Vec<Conv>,
    proj: Linear,
}

impl VisionEncoder {
    pub fn new(config: VisionConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::new();
        let (mut hw, mut cin) = (config.image_size, config.in_channels);
        for (i, &cout) in config.channels.iter().enumerate() {
            let fan_in = 9 * cin;
            let w = store.add(format!("vision.conv{i}.w"), kaiming(&[fan_in, cout], fan_in, rng));
            let b = store.add(format!("vision.conv{i}.b"), Tensor::zeros(&[cout]));
            convs.push(Conv {
                w,
                b,
                in_hw: hw,
                cin,
                index: im2col_index(hw, cin).into(),
            });
            hw /= 2;
            cin = cout;
        }
        let proj = Linear::new(store, "vision.proj", cin, config.d, 1.0, rng);
        Ok(Self {
            config,
            convs,
            proj,
        })
    }

    pub fn config(&self) -> &VisionConfig {
        &self.config
    }

    /// Stacks images into a constant `[B, H, W, C]` tensor.
    pub fn batch_tensor(&self, images: &[&Image]) -> Result<Tensor> {
        let s = self.config.image_size;
        let mut data = Vec::with_capacity(images.len() * s * s * self.config.in_channels);
        for im in images {
            if im.height() != s || im.width() != s || im.channels() != self.config.in_channels {
                return Err(Error::Config(format!(
                    "image {}x{}x{} does not match encoder input {s}x{s}x{}",
                    im.height(),
                    im.width(),
                    im.channels(),
                    self.config.in_channels
                )));
            }
            data.extend_from_slice(im.data());
        }
        Ok(Tensor::new(
            vec![images.len(), s, s, self.config.in_channels],
            data,
        )?)
    }

    /// `[B, H, W, C]` pixels to `[B, h·w, d]` patch features, row-major
    /// over the grid.
    pub fn encode(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let n = self.config.image_size;
        if s.len() != 4 || s[1] != n || s[2] != n || s[3] != self.config.in_channels {
            return Err(Error::Config(format!(
                "encoder input shape {s:?}, expected [B, {n}, {n}, {}]",
                self.config.in_channels
            )));
        }
        let batch = s[0];
        let mut h = x;
        for conv in &self.convs {
            let per_image = conv.in_hw * conv.in_hw * conv.cin;
            let cols = conv.index.len();
            let mut idx = Vec::with_capacity(batch * cols);
            for b in 0..batch {
                let off = b * per_image;
                idx.extend(conv.index.iter().map(|&i| {
                    if i == GATHER_ZERO {
                        i
                    } else {
                        i + off
                    }
                }));
            }
            let o = conv.out_hw();
            let patches = g.gather(h, idx.into(), &[batch * o * o, 9 * conv.cin])?;
            let y = g.matmul(patches, p.var(conv.w))?;
            let y = g.add(y, p.var(conv.b))?;
            h = g.relu(y)?;
        }
        let c = *self.config.channels.last().expect("validated");
        let n = self.config.num_patches();
        let h = g.reshape(h, &[batch, n, c])?;
        self.proj.forward(g, p, h)
    }

    /// Inference helper: features of one image as a [`FeatureMap`].
    pub fn encode_image(&self, store: &ParamStore, image: &Image) -> Result<FeatureMap> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(self.batch_tensor(&[image])?);
        let f = self.encode(&mut g, &p, x)?;
        let grid = self.config.grid();
        FeatureMap::new(grid, grid, self.config.d, g.value(f).data().to_vec())
    }
}

/// `h × w` grid of `d`-dimensional features, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * d {
            return Err(Error::Invalid(format!(
                "feature map {h}x{w}x{d} needs {} values, got {}",
                h * w * d,
                data.len()
            )));
        }
        Ok(Self { h, w, d, data })
    }

    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let i = self.patch_index(row, col);
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn patch_index(&self, row: usize, col: usize) -> usize {
        row * self.w + col
    }

    pub fn patch_cell(&self, index: usize) -> (usize, usize) {
        (index / self.w, index % self.w)
    }

    /// `[(h·w), d]` token matrix.
    pub fn flatten(&self) -> Tensor {
        Tensor::matrix(self.h * self.w, self.d, self.data.clone()).expect("checked length")
    }

    pub fn unflatten(tokens: &Tensor, h: usize, w: usize) -> Result<Self> {
        let s = tokens.shape();
        if s.len() != 2 || s[0] != h * w {
            return Err(Error::Invalid(format!("{s:?} is not a {h}x{w} token matrix")));
        }
        Self::new(h, w, s[1], tokens.data().to_vec())
    }

    /// Euclidean norm of each cell's feature vector, row-major.
    pub fn activation_norms(&self) -> Vec<f64> {
        self.data
            .chunks(self.d)
            .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect()
    }
}
