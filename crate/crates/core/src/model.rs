// SPDX-License-Identifier: Apache-2.0

//! Encoder and decoder bundled with their parameters.

use entalign_autodiff::{Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionDecoder, FusionOutput, FusionVars};
use crate::image::Image;
use crate::params::{Bound, ParamStore};
use crate::rng::{purpose, stream};
use crate::vision::{VisionConfig, VisionEncoder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vision: VisionConfig,
    pub fusion: FusionConfig,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            vision: VisionConfig::desk(),
            fusion: FusionConfig::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.fusion.validate()?;
        if self.vision.d != self.fusion.d {
            return Err(Error::Config(format!(
                "encoder width {} differs from decoder width {}",
                self.vision.d, self.fusion.d
            )));
        }
        if self.vision.num_patches() != self.fusion.patches {
            return Err(Error::Config(format!(
                "encoder yields {} patches, decoder expects {}",
                self.vision.num_patches(),
                self.fusion.patches
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub vision: VisionEncoder,
    pub fusion: FusionDecoder,
}

impl Model {
    /// Fresh parameters drawn from the `seed` initialisation stream.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = stream(seed, &[purpose::INIT]);
        let vision = VisionEncoder::new(config.vision.clone(), &mut store, &mut rng)?;
        let fusion = FusionDecoder::new(config.fusion.clone(), &mut store, &mut rng)?;
        Ok(Self {
            store,
            vision,
            fusion,
        })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            vision: self.vision.config().clone(),
            fusion: self.fusion.config().clone(),
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.vision.config().grid();
        (g, g)
    }

    /// Encoder then decoder on an existing graph.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        images: &[&Image],
        queries: &Tensor,
    ) -> Result<FusionVars> {
        let x = g.constant(self.vision.batch_tensor(images)?);
        let memory = self.vision.encode(g, p, x)?;
        self.fusion.forward(g, p, memory, queries)
    }

    /// Gradient-free forward pass, one output per image.
    pub fn infer(&self, images: &[&Image], queries: &Tensor) -> Result<Vec<FusionOutput>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let vars = self.forward(&mut g, &p, images, queries)?;
        Ok(self.fusion.collect_outputs(&g, &vars))
    }
}
