// SPDX-License-Identifier: Apache-2.0

//! Knowledge base and the deterministic text embedder.
//!
//! Entities are translated into attribute-word descriptions before being
//! embedded. The embedder is a fixed function: every token maps to a
//! seeded pseudorandom unit vector, and a text embeds to the mean of its
//! token vectors. Texts that share attribute words therefore share
//! embedding mass, which is what lets a description of an unseen entity
//! land near the seen entities it resembles.

use std::collections::HashSet;
use std::path::Path;

use entalign_autodiff::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const KB_FORMAT: &str = "entalign-kb/1";
pub const UNSPECIFIED: &str = "unspecified";
pub const OTHER: &str = "other";
pub const POSITION_PROMPT_PREFIX: &str = "It is located at";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PositionId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityEntry {
    pub name: String,
    pub description: String,
    /// Seen entities form the training query set.
    pub seen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub format: String,
    /// Position vocabulary; must contain `unspecified` and `other`.
    pub positions: Vec<String>,
    pub entities: Vec<EntityEntry>,
}

/// Which text stands in for an entity when it is embedded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum QueryText {
    /// Knowledge-base description (entity translation on).
    #[default]
    Description,
    /// The bare entity name.
    Name,
}

/// An entity to query: a known id, or free description text.
#[derive(Clone, Debug, PartialEq)]
pub enum EntityQuery {
    Known(EntityId),
    Described(String),
}

impl KnowledgeBase {
    pub fn new(positions: Vec<String>, entities: Vec<EntityEntry>) -> Result<Self> {
        let kb = Self {
            format: KB_FORMAT.to_string(),
            positions,
            entities,
        };
        kb.validate()?;
        Ok(kb)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::KnowledgeBase(m));
        if self.format != KB_FORMAT {
            return bad(format!("format tag {:?}, expected {KB_FORMAT:?}", self.format));
        }
        let mut names = HashSet::new();
        for e in &self.entities {
            if e.name.trim().is_empty() {
                return bad("empty entity name".into());
            }
            if !names.insert(e.name.as_str()) {
                return bad(format!("duplicate entity {:?}", e.name));
            }
            if tokenize(&e.description).is_empty() {
                return bad(format!("entity {:?} has an empty description", e.name));
            }
        }
        let mut pos = HashSet::new();
        for p in &self.positions {
            if !pos.insert(p.as_str()) {
                return bad(format!("duplicate position {p:?}"));
            }
        }
        for required in [UNSPECIFIED, OTHER] {
            if !pos.contains(required) {
                return bad(format!("position vocabulary lacks {required:?}"));
            }
        }
        if !self.entities.iter().any(|e| e.seen) {
            return bad("no seen entities".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let kb: Self = toml::from_str(text).map_err(|e| Error::KnowledgeBase(e.to_string()))?;
        kb.validate()?;
        Ok(kb)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("knowledge base serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn entity(&self, id: EntityId) -> Option<&EntityEntry> {
        self.entities.get(id.0)
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entities.iter().position(|e| e.name == name).map(EntityId)
    }

    pub fn position_id(&self, name: &str) -> Option<PositionId> {
        self.positions.iter().position(|p| p == name).map(PositionId)
    }

    pub fn position_name(&self, id: PositionId) -> Option<&str> {
        self.positions.get(id.0).map(String::as_str)
    }

    pub fn unspecified(&self) -> PositionId {
        self.position_id(UNSPECIFIED).expect("validated vocabulary")
    }

    /// Seen entities in query order.
    pub fn seen(&self) -> Vec<EntityId> {
        (0..self.entities.len())
            .filter(|&i| self.entities[i].seen)
            .map(EntityId)
            .collect()
    }

    pub fn unseen(&self) -> Vec<EntityId> {
        (0..self.entities.len())
            .filter(|&i| !self.entities[i].seen)
            .map(EntityId)
            .collect()
    }

    /// Row of `id` in the query matrix, if it is a seen entity.
    pub fn query_index(&self, id: EntityId) -> Option<usize> {
        if !self.entities.get(id.0)?.seen {
            return None;
        }
        Some(self.entities[..id.0].iter().filter(|e| e.seen).count())
    }

    pub fn num_queries(&self) -> usize {
        self.entities.iter().filter(|e| e.seen).count()
    }

    pub fn num_positions(&self) -> usize {
        self.positions.len()
    }
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// The text that represents an entity for embedding.
pub fn describe(query: &EntityQuery, kb: &KnowledgeBase) -> Result<String> {
    match query {
        EntityQuery::Known(id) => kb
            .entity(*id)
            .map(|e| e.description.clone())
            .ok_or_else(|| Error::UnknownEntity(format!("#{}", id.0))),
        EntityQuery::Described(text) => {
            if tokenize(text).is_empty() {
                Err(Error::EmptyDescription)
            } else {
                Ok(text.clone())
            }
        }
    }
}

/// Prompt whose embedding represents a position.
pub fn position_prompt(name: &str) -> String {
    format!("{POSITION_PROMPT_PREFIX} {name}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl TextEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    /// Unit vector for one token, a pure function of `(seed, token)`.
    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(token.as_bytes());
        let digest: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        let mut v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }

    /// Mean of the token vectors of `text`. Not normalised.
    pub fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::EmptyDescription);
        }
        let mut acc = vec![0.0; self.dim];
        for t in &tokens {
            for (a, v) in acc.iter_mut().zip(self.token_vector(t)) {
                *a += v;
            }
        }
        let n = tokens.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }

    pub fn embed_entity(
        &self,
        query: &EntityQuery,
        kb: &KnowledgeBase,
        text: QueryText,
    ) -> Result<Vec<f64>> {
        match (query, text) {
            (EntityQuery::Known(id), QueryText::Name) => {
                let e = kb
                    .entity(*id)
                    .ok_or_else(|| Error::UnknownEntity(format!("#{}", id.0)))?;
                self.embed(&e.name)
            }
            _ => self.embed(&describe(query, kb)?),
        }
    }

    pub fn embed_position(&self, id: PositionId, kb: &KnowledgeBase) -> Result<Vec<f64>> {
        let name = kb
            .position_name(id)
            .ok_or_else(|| Error::UnknownPosition(format!("#{}", id.0)))?;
        self.embed(&position_prompt(name))
    }

    /// `[|Q|, dim]` matrix of seen-entity embeddings in query order.
    pub fn query_matrix(&self, kb: &KnowledgeBase, text: QueryText) -> Result<Tensor> {
        let mut data = Vec::new();
        for id in kb.seen() {
            data.extend(self.embed_entity(&EntityQuery::Known(id), kb, text)?);
        }
        Ok(Tensor::matrix(kb.num_queries(), self.dim, data)?)
    }

    /// `[|P|, dim]` matrix of position-prompt embeddings.
    pub fn position_bank(&self, kb: &KnowledgeBase) -> Result<Tensor> {
        let mut data = Vec::new();
        for j in 0..kb.num_positions() {
            data.extend(self.embed_position(PositionId(j), kb)?);
        }
        Ok(Tensor::matrix(kb.num_positions(), self.dim, data)?)
    }
}

/// Query matrix and position bank together.
pub fn build_query_embeddings(
    kb: &KnowledgeBase,
    embedder: &TextEmbedder,
    text: QueryText,
) -> Result<(Tensor, Tensor)> {
    Ok((embedder.query_matrix(kb, text)?, embedder.position_bank(kb)?))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kb() -> KnowledgeBase {
        KnowledgeBase::new(
            vec!["right lower lobe".into(), "left apex".into(), OTHER.into(), UNSPECIFIED.into()],
            vec![
                EntityEntry {
                    name: "pneumonia".into(),
                    description: "bright large blurred opacity".into(),
                    seen: true,
                },
                EntityEntry {
                    name: "edema".into(),
                    description: "faint large blurred opacity".into(),
                    seen: true,
                },
                EntityEntry {
                    name: "fracture".into(),
                    description: "thin sharp linear lucency".into(),
                    seen: false,
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn tokenizer_lowercases_and_splits_punctuation() {
        assert_eq!(tokenize("Bright, ROUND-blob."), vec!["bright", "round", "blob"]);
    }

    #[test]
    fn describe_known_and_user_text() {
        let kb = kb();
        let d = describe(&EntityQuery::Known(EntityId(0)), &kb).unwrap();
        assert_eq!(d, "bright large blurred opacity");
        let t = "bright round blob with halo";
        assert_eq!(describe(&EntityQuery::Described(t.into()), &kb).unwrap(), t);
        assert!(matches!(
            describe(&EntityQuery::Known(EntityId(9)), &kb),
            Err(Error::UnknownEntity(_))
        ));
    }

    #[test]
    fn empty_description_is_rejected() {
        let e = TextEmbedder::new(16, 1);
        assert!(matches!(e.embed("  ,. "), Err(Error::EmptyDescription)));
        assert!(matches!(
            e.embed_entity(&EntityQuery::Described(String::new()), &kb(), QueryText::Description),
            Err(Error::EmptyDescription)
        ));
    }

    #[test]
    fn embedding_is_mean_of_token_vectors() {
        let e = TextEmbedder::new(32, 7);
        let ab = e.embed("a b").unwrap();
        let (a, b) = (e.token_vector("a"), e.token_vector("b"));
        for i in 0..32 {
            assert!((ab[i] - (a[i] + b[i]) / 2.0).abs() < 1e-15);
        }
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn embedding_is_deterministic() {
        let kb = kb();
        let e = TextEmbedder::new(64, 3);
        let q = EntityQuery::Known(EntityId(1));
        assert_eq!(
            e.embed_entity(&q, &kb, QueryText::Description).unwrap(),
            e.embed_entity(&q, &kb, QueryText::Description).unwrap()
        );
        assert_ne!(
            e.embed("opacity").unwrap(),
            TextEmbedder::new(64, 4).embed("opacity").unwrap()
        );
    }

    #[test]
    fn shared_attribute_words_raise_cosine() {
        let kb = kb();
        let e = TextEmbedder::new(64, 11);
        let emb = |i| {
            e.embed_entity(&EntityQuery::Known(EntityId(i)), &kb, QueryText::Description)
                .unwrap()
        };
        let shared = cosine(&emb(0), &emb(1));
        let disjoint = cosine(&emb(0), &emb(2));
        assert!(shared > disjoint, "{shared} vs {disjoint}");
    }

    #[test]
    fn position_prompt_is_exact() {
        assert_eq!(position_prompt("right lower lobe"), "It is located at right lower lobe");
        let kb = kb();
        let e = TextEmbedder::new(16, 2);
        assert_eq!(
            e.embed_position(PositionId(0), &kb).unwrap(),
            e.embed("It is located at right lower lobe").unwrap()
        );
        assert!(matches!(
            e.embed_position(PositionId(17), &kb),
            Err(Error::UnknownPosition(_))
        ));
    }

    #[test]
    fn query_matrix_rows_match_individual_embeddings() {
        let kb = kb();
        let e = TextEmbedder::new(8, 5);
        let (q, p) = build_query_embeddings(&kb, &e, QueryText::Description).unwrap();
        assert_eq!(q.shape(), &[2, 8]);
        assert_eq!(p.shape(), &[4, 8]);
        for (row, id) in kb.seen().into_iter().enumerate() {
            let v = e
                .embed_entity(&EntityQuery::Known(id), &kb, QueryText::Description)
                .unwrap();
            assert_eq!(q.row(row), &v[..]);
        }
    }

    #[test]
    fn query_index_skips_unseen() {
        let mut k = kb();
        k.entities.swap(0, 2);
        assert_eq!(k.query_index(EntityId(0)), None);
        assert_eq!(k.query_index(EntityId(1)), Some(0));
        assert_eq!(k.query_index(EntityId(2)), Some(1));
    }

    #[test]
    fn validation_catches_duplicates_and_missing_positions() {
        let mut k = kb();
        k.entities[1].name = "pneumonia".into();
        assert!(k.validate().is_err());
        let mut k = kb();
        k.positions.retain(|p| p != UNSPECIFIED);
        assert!(k.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let k = kb();
        assert_eq!(KnowledgeBase::from_toml(&k.to_toml()).unwrap(), k);
    }
}
