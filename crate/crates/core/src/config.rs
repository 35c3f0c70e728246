// SPDX-License-Identifier: Apache-2.0

//! Run configuration: one TOML document layered over a named preset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::inference::EvalOptions;
use crate::kb::{EntityEntry, KnowledgeBase, TextEmbedder, OTHER, UNSPECIFIED};
use crate::model::ModelConfig;
use crate::parser::{GrammarFile, ReportGrammar};
use crate::training::TrainConfig;
use crate::vision::VisionConfig;
use crate::world::WorldSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

/// Where the knowledge base comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KbSource {
    /// Derived from the world spec.
    World,
    /// A knowledge-base TOML file.
    File { path: PathBuf },
    /// Generic names of the given sizes; enough to size a model, not to
    /// train one on the synthetic world.
    Placeholder { entities: usize, positions: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub samples: usize,
    /// Train, validation and test fractions.
    pub fractions: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub world: WorldSpec,
    pub dataset: DatasetConfig,
    pub knowledge_base: KbSource,
    /// Grammar TOML file; `None` derives the grammar from the world spec.
    pub grammar: Option<PathBuf>,
    pub embedder: TextEmbedder,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            seed: 0,
            world: WorldSpec::desk(),
            dataset: DatasetConfig {
                samples: 2000,
                fractions: [0.6, 0.2, 0.2],
            },
            knowledge_base: KbSource::World,
            grammar: None,
            embedder: TextEmbedder::new(64, 0),
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            eval: EvalOptions::default(),
        }
    }

    /// Full-size dimensions and optimiser constants. The placeholder
    /// knowledge base has 75 queries and 51 positions.
    pub fn paper() -> Self {
        let d = 256;
        let d_text = 768;
        let vision = VisionConfig {
            image_size: 224,
            in_channels: 1,
            channels: vec![64, 128, 256, 256],
            d,
        };
        let fusion = FusionConfig {
            d_text,
            d,
            layers: 4,
            heads: 4,
            ffn: 4 * d,
            self_attention: true,
            patches: vision.num_patches(),
        };
        let mut world = WorldSpec::desk();
        world.canvas = vision.image_size;
        world.patch = 16;
        Self {
            preset: Preset::Paper,
            world,
            knowledge_base: KbSource::Placeholder {
                entities: 75,
                positions: 51,
            },
            embedder: TextEmbedder::new(d_text, 0),
            model: ModelConfig { vision, fusion },
            train: TrainConfig::paper(),
            ..Self::desk()
        }
    }

    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    /// `preset` with the tables of `overrides` merged on top, key by key.
    pub fn layered(preset: Preset, overrides: Option<&str>) -> Result<Self> {
        let base = Self::preset(preset);
        let Some(text) = overrides else {
            return Ok(base);
        };
        let over: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, over);
        let cfg: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical TOML form.
    pub fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }

    pub fn knowledge_base(&self) -> Result<KnowledgeBase> {
        match &self.knowledge_base {
            KbSource::World => self.world.knowledge_base(),
            KbSource::File { path } => KnowledgeBase::load(path),
            KbSource::Placeholder {
                entities,
                positions,
            } => placeholder_kb(*entities, *positions),
        }
    }

    pub fn grammar_file(&self) -> Result<GrammarFile> {
        match &self.grammar {
            Some(path) => GrammarFile::load(path),
            None => Ok(self.world.grammar_file()),
        }
    }

    pub fn grammar(&self, kb: &KnowledgeBase) -> Result<ReportGrammar> {
        ReportGrammar::new(self.grammar_file()?, kb)
    }

    /// Checks every cross-field constraint that does not need data.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let kb = self.knowledge_base()?;
        self.train.validate(kb.num_positions())?;
        if self.embedder.dim != self.model.fusion.d_text {
            return Err(Error::Config(format!(
                "embedder width {} differs from decoder query width {}",
                self.embedder.dim, self.model.fusion.d_text
            )));
        }
        if self.world.canvas != self.model.vision.image_size {
            return Err(Error::Config(format!(
                "canvas {} differs from encoder input size {}",
                self.world.canvas, self.model.vision.image_size
            )));
        }
        let f = self.dataset.fractions;
        if f.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {f:?} must sum to 1")));
        }
        if self.dataset.samples == 0 {
            return Err(Error::Config("dataset needs at least one sample".into()));
        }
        if self.eval.batch_size == 0 || !(0.0..=1.0).contains(&self.eval.iou_threshold) {
            return Err(Error::Config("invalid evaluation options".into()));
        }
        Ok(())
    }

    /// Whether the knowledge base can drive training on the world data.
    pub fn trainable(&self) -> bool {
        !matches!(self.knowledge_base, KbSource::Placeholder { .. })
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn placeholder_kb(entities: usize, positions: usize) -> Result<KnowledgeBase> {
    if positions < 2 {
        return Err(Error::Config("placeholder needs at least two positions".into()));
    }
    let mut names: Vec<String> = (0..positions - 2).map(|i| format!("position {i:02}")).collect();
    names.push(OTHER.to_string());
    names.push(UNSPECIFIED.to_string());
    let entries = (0..entities)
        .map(|i| EntityEntry {
            name: format!("entity {i:02}"),
            description: format!("finding number {i:02}"),
            seen: true,
        })
        .collect();
    KnowledgeBase::new(names, entries)
}
