// SPDX-License-Identifier: Apache-2.0

//! Query decoder: entity embeddings attend to image patches through a stack
//! of pre-norm transformer layers, then feed an existence head and a
//! position head.
//!
//! Queries carry no positional encoding, so the decoder is equivariant to
//! query order. To make that hold bit for bit even with query
//! self-attention (whose sums run over the other queries), queries are put
//! into a canonical order before decoding and the outputs are put back.

use std::cmp::Ordering;
use std::rc::Rc;

use entalign_autodiff::{Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Heatmap;
use crate::params::{Bound, Linear, Norm, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Text embedding dimension `d′`.
    pub d_text: usize,
    /// Model width `d`.
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    /// Hidden width of the feed-forward sublayer.
    pub ffn: usize,
    /// Self-attention among queries in every layer.
    pub self_attention: bool,
    /// Number of image patches `h·w`.
    pub patches: usize,
}

impl FusionConfig {
    pub fn desk() -> Self {
        Self {
            d_text: 64,
            d: 32,
            layers: 2,
            heads: 4,
            ffn: 64,
            self_attention: true,
            patches: 16,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_text == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d = {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.ffn == 0 || self.patches == 0 {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Attention {
    fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, 1.0, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, 1.0, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, 1.0, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, 1.0, rng),
        }
    }
}

#[derive(Clone, Debug)]
struct Layer {
    self_norm: Option<Norm>,
    self_attn: Option<Attention>,
    cross_norm: Norm,
    cross_attn: Attention,
    ffn_norm: Norm,
    ffn_in: Linear,
    ffn_out: Linear,
}

/// Decoder parameters and structure.
#[derive(Clone, Debug)]
pub struct FusionDecoder {
    config: FusionConfig,
    query_proj: Linear,
    patch_pos: ParamId,
    memory_norm: Norm,
    layers: Vec<Layer>,
    final_norm: Norm,
    exist_hidden: Linear,
    exist_out: Linear,
    pos_hidden: Linear,
    pos_out: Linear,
}

/// Graph handles produced by [`FusionDecoder::forward`].
#[derive(Clone, Debug)]
pub struct FusionVars {
    /// `[B, Q]` existence logits in caller query order.
    pub exist_logits: Var,
    /// `[B, Q, d′]` position predictions in caller query order.
    pub positions: Var,
    /// Per layer `[B, heads, Q, N]` cross-attention, in canonical order.
    pub attn: Vec<Var>,
    /// `order[k]` is the caller row decoded at canonical slot `k`.
    pub order: Vec<usize>,
}

/// Decoder outputs for one image, in caller query order.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutput {
    pub exist_logits: Vec<f64>,
    /// `[Q, d′]`.
    pub positions: Tensor,
    /// Per layer `[heads, Q, N]` cross-attention weights.
    pub attn_maps: Vec<Tensor>,
}

/// Sorts rows of `q` lexicographically by their bit patterns.
pub fn canonical_order(q: &Tensor) -> Vec<usize> {
    let mut order: Vec<usize> = (0..q.shape()[0]).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (q.row(a), q.row(b));
        for (x, y) in ra.iter().zip(rb) {
            match x.to_bits().cmp(&y.to_bits()) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        a.cmp(&b)
    });
    order
}

fn split_heads_index(b: usize, t: usize, heads: usize, dh: usize) -> Vec<usize> {
    let d = heads * dh;
    let mut idx = Vec::with_capacity(b * t * d);
    for bi in 0..b {
        for h in 0..heads {
            for ti in 0..t {
                for j in 0..dh {
                    idx.push((bi * t + ti) * d + h * dh + j);
                }
            }
        }
    }
    idx
}

fn merge_heads_index(b: usize, t: usize, heads: usize, dh: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(b * t * heads * dh);
    for bi in 0..b {
        for ti in 0..t {
            for h in 0..heads {
                for j in 0..dh {
                    idx.push(((bi * heads + h) * t + ti) * dh + j);
                }
            }
        }
    }
    idx
}

impl FusionDecoder {
    pub fn new(config: FusionConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let query_proj = Linear::new(store, "fusion.query_proj", config.d_text, d, 1.0, rng);
        let patch_pos = store.add("fusion.patch_pos", Tensor::zeros(&[config.patches, d]));
        let memory_norm = Norm::new(store, "fusion.memory_norm", d);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let name = format!("fusion.layer{l}");
            let (self_norm, self_attn) = if config.self_attention {
                (
                    Some(Norm::new(store, &format!("{name}.self_norm"), d)),
                    Some(Attention::new(store, &format!("{name}.self_attn"), d, rng)),
                )
            } else {
                (None, None)
            };
            layers.push(Layer {
                self_norm,
                self_attn,
                cross_norm: Norm::new(store, &format!("{name}.cross_norm"), d),
                cross_attn: Attention::new(store, &format!("{name}.cross_attn"), d, rng),
                ffn_norm: Norm::new(store, &format!("{name}.ffn_norm"), d),
                ffn_in: Linear::new(
                    store,
                    &format!("{name}.ffn_in"),
                    d,
                    config.ffn,
                    std::f64::consts::SQRT_2,
                    rng,
                ),
                ffn_out: Linear::new(store, &format!("{name}.ffn_out"), config.ffn, d, 1.0, rng),
            });
        }
        let final_norm = Norm::new(store, "fusion.final_norm", d);
        let sqrt2 = std::f64::consts::SQRT_2;
        let exist_hidden = Linear::new(store, "fusion.exist_hidden", d, d, sqrt2, rng);
        let exist_out = Linear::new(store, "fusion.exist_out", d, 1, 1.0, rng);
        let pos_hidden = Linear::new(store, "fusion.pos_hidden", d, d, sqrt2, rng);
        let pos_out = Linear::new(store, "fusion.pos_out", d, config.d_text, 1.0, rng);
        Ok(Self {
            config,
            query_proj,
            patch_pos,
            memory_norm,
            layers,
            final_norm,
            exist_hidden,
            exist_out,
            pos_hidden,
            pos_out,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    /// Parameters used only by the position head.
    pub fn position_head_params(&self) -> [ParamId; 4] {
        [
            self.pos_hidden.w,
            self.pos_hidden.b,
            self.pos_out.w,
            self.pos_out.b,
        ]
    }

    /// Output layer of the existence head.
    pub fn exist_out_params(&self) -> [ParamId; 2] {
        [self.exist_out.w, self.exist_out.b]
    }

    fn attend(
        &self,
        g: &mut Graph,
        p: &Bound,
        a: &Attention,
        x: Var,
        kv: Var,
    ) -> Result<(Var, Var)> {
        let (heads, dh) = (self.config.heads, self.config.head_dim());
        let (b, t, s) = (g.shape(x)[0], g.shape(x)[1], g.shape(kv)[1]);
        let q = a.q.forward(g, p, x)?;
        let k = a.k.forward(g, p, kv)?;
        let v = a.v.forward(g, p, kv)?;
        let qh = g.gather(q, split_heads_index(b, t, heads, dh).into(), &[b, heads, t, dh])?;
        let kh = g.gather(k, split_heads_index(b, s, heads, dh).into(), &[b, heads, s, dh])?;
        let vh = g.gather(v, split_heads_index(b, s, heads, dh).into(), &[b, heads, s, dh])?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let weights = g.softmax(scores, 3)?;
        let o = g.matmul(weights, vh)?;
        let o = g.gather(o, merge_heads_index(b, t, heads, dh).into(), &[b, t, heads * dh])?;
        Ok((a.o.forward(g, p, o)?, weights))
    }

    /// Decodes `queries` (`[Q, d′]`) against patch features `memory`
    /// (`[B, N, d]`).
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        memory: Var,
        queries: &Tensor,
    ) -> Result<FusionVars> {
        let c = &self.config;
        let qs = queries.shape();
        if qs.len() != 2 || qs[0] == 0 || qs[1] != c.d_text {
            return Err(Error::Config(format!(
                "query matrix {qs:?}, expected [Q >= 1, {}]",
                c.d_text
            )));
        }
        let ms = g.shape(memory).to_vec();
        if ms.len() != 3 || ms[1] != c.patches || ms[2] != c.d {
            return Err(Error::Config(format!(
                "memory {ms:?}, expected [B, {}, {}]",
                c.patches, c.d
            )));
        }
        let (b, nq) = (ms[0], qs[0]);

        let order = canonical_order(queries);
        let mut sorted = Vec::with_capacity(queries.len());
        for &i in &order {
            sorted.extend_from_slice(queries.row(i));
        }
        let q = g.constant(Tensor::matrix(nq, c.d_text, sorted)?);
        let q = self.query_proj.forward(g, p, q)?;
        let zeros = g.constant(Tensor::zeros(&[b, nq, c.d]));
        let mut x = g.add(zeros, q)?;

        let mem = self.memory_norm.forward(g, p, memory)?;
        let mem = g.add(mem, p.var(self.patch_pos))?;

        let mut attn = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            if let (Some(norm), Some(sa)) = (&layer.self_norm, &layer.self_attn) {
                let h = norm.forward(g, p, x)?;
                let (o, _) = self.attend(g, p, sa, h, h)?;
                x = g.add(x, o)?;
            }
            let h = layer.cross_norm.forward(g, p, x)?;
            let (o, w) = self.attend(g, p, &layer.cross_attn, h, mem)?;
            x = g.add(x, o)?;
            attn.push(w);
            let h = layer.ffn_norm.forward(g, p, x)?;
            let h = layer.ffn_in.forward(g, p, h)?;
            let h = g.relu(h)?;
            let h = layer.ffn_out.forward(g, p, h)?;
            x = g.add(x, h)?;
        }
        let y = self.final_norm.forward(g, p, x)?;

        let e = self.exist_hidden.forward(g, p, y)?;
        let e = g.relu(e)?;
        let e = self.exist_out.forward(g, p, e)?;
        let pos = self.pos_hidden.forward(g, p, y)?;
        let pos = g.relu(pos)?;
        let pos = self.pos_out.forward(g, p, pos)?;

        let mut slot = vec![0; nq];
        for (k, &i) in order.iter().enumerate() {
            slot[i] = k;
        }
        let logit_idx: Vec<usize> = (0..b)
            .flat_map(|bi| slot.iter().map(move |&k| bi * nq + k))
            .collect();
        let exist_logits = g.gather(e, logit_idx.into(), &[b, nq])?;
        let dt = c.d_text;
        let pos_idx: Rc<[usize]> = (0..b)
            .flat_map(|bi| {
                slot.iter()
                    .flat_map(move |&k| (0..dt).map(move |j| (bi * nq + k) * dt + j))
            })
            .collect();
        let positions = g.gather(pos, pos_idx, &[b, nq, dt])?;

        Ok(FusionVars {
            exist_logits,
            positions,
            attn,
            order,
        })
    }

    /// Runs [`forward`](Self::forward) without gradients and splits the
    /// result per image.
    pub fn fuse(
        &self,
        store: &ParamStore,
        memory: &Tensor,
        queries: &Tensor,
    ) -> Result<Vec<FusionOutput>> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let m = g.constant(memory.clone());
        let vars = self.forward(&mut g, &p, m, queries)?;
        Ok(self.collect_outputs(&g, &vars))
    }

    /// Copies decoder outputs off a graph, one entry per image.
    pub fn collect_outputs(&self, g: &Graph, vars: &FusionVars) -> Vec<FusionOutput> {
        let logits = g.value(vars.exist_logits);
        let (b, nq) = (logits.shape()[0], logits.shape()[1]);
        let dt = self.config.d_text;
        let (heads, n) = (self.config.heads, self.config.patches);
        let pos = g.value(vars.positions).data();
        (0..b)
            .map(|bi| {
                let attn_maps = vars
                    .attn
                    .iter()
                    .map(|&a| {
                        let a = g.value(a).data();
                        let mut out = vec![0.0; heads * nq * n];
                        for h in 0..heads {
                            for (k, &i) in vars.order.iter().enumerate() {
                                let src = ((bi * heads + h) * nq + k) * n;
                                let dst = (h * nq + i) * n;
                                out[dst..dst + n].copy_from_slice(&a[src..src + n]);
                            }
                        }
                        Tensor::new(vec![heads, nq, n], out).expect("attention is finite")
                    })
                    .collect();
                FusionOutput {
                    exist_logits: logits.data()[bi * nq..(bi + 1) * nq].to_vec(),
                    positions: Tensor::matrix(
                        nq,
                        dt,
                        pos[bi * nq * dt..(bi + 1) * nq * dt].to_vec(),
                    )
                    .expect("positions are finite"),
                    attn_maps,
                }
            })
            .collect()
    }
}

/// Adds a zero-shot query row under the existing ones.
pub fn append_zero_shot_query(queries: &Tensor, embedding: &[f64]) -> Result<Tensor> {
    let s = queries.shape();
    if s.len() != 2 || s[1] != embedding.len() {
        return Err(Error::Config(format!(
            "query embedding of length {} does not match query matrix {s:?}",
            embedding.len()
        )));
    }
    let mut data = queries.data().to_vec();
    data.extend_from_slice(embedding);
    Ok(Tensor::matrix(s[0] + 1, s[1], data)?)
}

/// Mean over layers and heads of one query's cross-attention, on the
/// `grid × grid` patch layout, upsampled by nearest neighbour to
/// `height × width`.
pub fn extract_heatmap(
    out: &FusionOutput,
    query: usize,
    grid: (usize, usize),
    height: usize,
    width: usize,
) -> Result<Heatmap> {
    let (gh, gw) = grid;
    let first = out
        .attn_maps
        .first()
        .ok_or_else(|| Error::Invalid("no attention maps".into()))?;
    let (heads, nq, n) = (first.shape()[0], first.shape()[1], first.shape()[2]);
    if query >= nq {
        return Err(Error::Invalid(format!("query index {query} out of {nq}")));
    }
    if gh * gw != n || !height.is_multiple_of(gh) || !width.is_multiple_of(gw) {
        return Err(Error::Invalid(format!(
            "cannot map {n} patches on a {gh}x{gw} grid to {height}x{width}"
        )));
    }
    let coarse = coarse_map(out, query)?;
    let (sy, sx) = (height / gh, width / gw);
    let mut values = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            values.push(coarse[(y / sy) * gw + x / sx]);
        }
    }
    debug_assert_eq!(heads * nq * n, first.len());
    Ok(Heatmap {
        height,
        width,
        values,
    })
}

/// Mean over layers and heads of one query's attention over patches.
pub fn coarse_map(out: &FusionOutput, query: usize) -> Result<Vec<f64>> {
    let first = out
        .attn_maps
        .first()
        .ok_or_else(|| Error::Invalid("no attention maps".into()))?;
    let (heads, nq, n) = (first.shape()[0], first.shape()[1], first.shape()[2]);
    if query >= nq {
        return Err(Error::Invalid(format!("query index {query} out of {nq}")));
    }
    let mut acc = vec![0.0; n];
    for a in &out.attn_maps {
        for h in 0..heads {
            let row = &a.data()[(h * nq + query) * n..(h * nq + query + 1) * n];
            for (s, v) in acc.iter_mut().zip(row) {
                *s += v;
            }
        }
    }
    let count = (out.attn_maps.len() * heads) as f64;
    Ok(acc.into_iter().map(|v| v / count).collect())
}
