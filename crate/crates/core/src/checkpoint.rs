// SPDX-License-Identifier: Apache-2.0

//! Binary checkpoints: a fixed header followed by length-prefixed named
//! blocks, all little-endian.
//!
//! ```text
//! magic "EALCKPT\0" | u32 version | [u8; 32] fingerprint | u64 epoch | u64 step
//! u32 block count, then per block:
//!   u32 name length | name | u8 kind
//!   kind 0 (text):   u64 length | UTF-8 bytes
//!   kind 1 (tensor): u32 rank | u64 dims | f64 values
//! ```
//!
//! Blocks are `config`, `kb`, then `param/<name>`, `adam_m/<name>` and
//! `adam_v/<name>` in parameter order.

use std::path::Path;

use entalign_autodiff::Tensor;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::kb::KnowledgeBase;
use crate::model::Model;
use crate::training::AdamW;

pub const MAGIC: &[u8; 8] = b"EALCKPT\0";
pub const VERSION: u32 = 1;

const TEXT: u8 = 0;
const TENSOR: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Text(String),
    Tensor(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub fingerprint: [u8; 32],
    /// Completed epochs.
    pub epoch: u64,
    /// Optimiser steps taken.
    pub step: u64,
    pub blocks: Vec<(String, Block)>,
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, kb: &KnowledgeBase, model: &Model, opt: &AdamW, epoch: u64) -> Self {
        let mut blocks = vec![
            ("config".to_string(), Block::Text(config.to_toml())),
            ("kb".to_string(), Block::Text(kb.to_toml())),
        ];
        for (prefix, tensors) in [
            ("param", model.store.tensors()),
            ("adam_m", &opt.m[..]),
            ("adam_v", &opt.v[..]),
        ] {
            for (i, t) in tensors.iter().enumerate() {
                let name = model.store.name(crate::params::ParamId(i));
                blocks.push((format!("{prefix}/{name}"), Block::Tensor(t.clone())));
            }
        }
        Self {
            version: VERSION,
            fingerprint: config.fingerprint(),
            epoch,
            step: opt.step,
            blocks,
        }
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, b)| b)
    }

    fn text(&self, name: &str) -> Result<&str> {
        match self.block(name) {
            Some(Block::Text(s)) => Ok(s),
            _ => Err(Error::format("checkpoint", format!("missing text block {name:?}"))),
        }
    }

    fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.block(name) {
            Some(Block::Tensor(t)) => Ok(t),
            _ => Err(Error::format("checkpoint", format!("missing tensor block {name:?}"))),
        }
    }

    /// The configuration stored with the checkpoint.
    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::from_toml(self.text("config")?)
    }

    pub fn knowledge_base(&self) -> Result<KnowledgeBase> {
        KnowledgeBase::from_toml(self.text("kb")?)
    }

    /// Rejects a checkpoint written under a different configuration unless
    /// `allow_mismatch` is set.
    pub fn check_fingerprint(&self, config: &RunConfig, allow_mismatch: bool) -> Result<()> {
        let expected = config.fingerprint();
        if expected != self.fingerprint && !allow_mismatch {
            return Err(Error::FingerprintMismatch {
                expected: hex::encode(expected),
                found: hex::encode(self.fingerprint),
            });
        }
        Ok(())
    }

    /// Model and optimiser state under `config`'s architecture.
    pub fn restore(&self, config: &RunConfig) -> Result<(Model, AdamW)> {
        let mut model = Model::new(&config.model, config.seed)?;
        let mut opt = AdamW::new(&model.store);
        let names: Vec<String> = model.store.iter().map(|(_, n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            model.store.set(name, self.tensor(&format!("param/{name}"))?.clone())?;
            for (prefix, slot) in [("adam_m", &mut opt.m[i]), ("adam_v", &mut opt.v[i])] {
                let t = self.tensor(&format!("{prefix}/{name}"))?;
                if t.shape() != slot.shape() {
                    return Err(Error::format("checkpoint", format!("{prefix}/{name} has shape {:?}", t.shape())));
                }
                *slot = t.clone();
            }
        }
        let params = self.blocks.iter().filter(|(n, _)| n.starts_with("param/")).count();
        if params != names.len() {
            return Err(Error::format(
                "checkpoint",
                format!("{params} parameter blocks for a model with {}", names.len()),
            ));
        }
        opt.step = self.step;
        Ok((model, opt))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, block) in &self.blocks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match block {
                Block::Text(s) => {
                    out.push(TEXT);
                    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
                    out.extend_from_slice(s.as_bytes());
                }
                Block::Tensor(t) => {
                    out.push(TENSOR);
                    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
                    for &d in t.shape() {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    for &v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let fingerprint: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let epoch = r.u64()?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = r.utf8(len)?;
            let block = match r.take(1)?[0] {
                TEXT => {
                    let len = r.len_u64()?;
                    Block::Text(r.utf8(len)?)
                }
                TENSOR => {
                    let rank = r.u32()? as usize;
                    let shape = (0..rank).map(|_| r.len_u64()).collect::<Result<Vec<_>>>()?;
                    let n = shape
                        .iter()
                        .try_fold(1usize, |a, &d| a.checked_mul(d))
                        .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                        .ok_or_else(|| Error::format("checkpoint", format!("tensor {name:?} overruns file")))?;
                    let data = r
                        .take(n * 8)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    Block::Tensor(Tensor::new(shape, data)?)
                }
                k => return Err(Error::format("checkpoint", format!("unknown block kind {k}"))),
            };
            blocks.push((name, block));
        }
        if r.remaining() != 0 {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Self {
            version,
            fingerprint,
            epoch,
            step,
            blocks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::format("checkpoint", "truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len_u64(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::format("checkpoint", "length overflow"))
    }

    fn utf8(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("checkpoint", "invalid UTF-8"))
    }
}
