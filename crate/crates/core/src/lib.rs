// SPDX-License-Identifier: Apache-2.0

//! Entity/image alignment from paired images and reports.
//!
//! Reports are parsed into `{entity, position, exist}` triplets, entity
//! names are swapped for knowledge-base descriptions and embedded, and a
//! query decoder aligns those embeddings with image patches. The trained
//! model scores entities, including ones only known by description, and
//! grounds them through its cross-attention.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod image;
pub mod inference;
pub mod kb;
pub mod metrics;
pub mod model;
pub mod params;
pub mod parser;
pub mod rng;
pub mod training;
pub mod vision;
pub mod world;

pub use error::{Error, Result};
