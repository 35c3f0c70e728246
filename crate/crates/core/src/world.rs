// SPDX-License-Identifier: Apache-2.0

//! Synthetic paired data: images of attribute-defined blobs with the
//! reports that describe them.
//!
//! Entities are bundles of four visual attributes. The knowledge base
//! describes each entity by exactly its attribute words, so an unseen
//! entity that recombines seen attributes can be described, and in
//! principle recognised, without any training example.
//!
//! Blob centres sit 2.3–2.7 px inside the top-left corner of an 8 px
//! anchor patch and the smallest radius is 3.5 px, so every mask contains
//! the top-left pixel of its anchor patch. Nearest-upsampled heatmaps
//! resolve ties to that pixel, which keeps the pointing game meaningful.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::kb::{EntityEntry, EntityId, KnowledgeBase, PositionId, OTHER, UNSPECIFIED};
use crate::parser::{
    merge_triplets, CueLists, ExistLabel, GrammarFile, LexiconEntry, Report, ReportGrammar,
    Templates, Triplet, TripletSet, GRAMMAR_FORMAT,
};
use crate::rng::{purpose, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intensity {
    Bright,
    Faint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Edge {
    Sharp,
    Blurred,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Solid,
    Mottled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attributes {
    pub intensity: Intensity,
    pub size: Size,
    pub edge: Edge,
    pub texture: Texture,
}

impl Attributes {
    pub fn words(&self) -> [&'static str; 4] {
        [
            match self.intensity {
                Intensity::Bright => "bright",
                Intensity::Faint => "faint",
            },
            match self.size {
                Size::Small => "small",
                Size::Large => "large",
            },
            match self.edge {
                Edge::Sharp => "sharp",
                Edge::Blurred => "blurred",
            },
            match self.texture {
                Texture::Solid => "solid",
                Texture::Mottled => "mottled",
            },
        ]
    }

    pub fn description(&self) -> String {
        self.words().join(" ")
    }

    fn amplitude(&self) -> f64 {
        match self.intensity {
            Intensity::Bright => 1.0,
            Intensity::Faint => 0.55,
        }
    }

    pub fn radius(&self) -> f64 {
        match self.size {
            Size::Small => 3.5,
            Size::Large => 5.5,
        }
    }

    /// Intensity at distance `d` from the centre of pixel `(y, x)`, before
    /// contrast scaling. Zero outside the radius.
    fn profile(&self, d: f64, y: usize, x: usize) -> f64 {
        let r = self.radius();
        if d >= r {
            return 0.0;
        }
        let shape = match self.edge {
            Edge::Sharp => 1.0,
            Edge::Blurred => 1.0 - 0.8 * (d / r).powi(2),
        };
        let tex = match self.texture {
            Texture::Solid => 1.0,
            Texture::Mottled => {
                if (x + y).is_multiple_of(2) {
                    1.0
                } else {
                    0.45
                }
            }
        };
        self.amplitude() * shape * tex
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityDef {
    pub name: String,
    pub attributes: Attributes,
    pub seen: bool,
    /// Probability that an image contains this entity.
    pub prevalence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    /// Square canvas side in pixels.
    pub canvas: usize,
    /// Position cells per side.
    pub grid: usize,
    /// Anchor patch side; should equal the encoder's total stride.
    pub patch: usize,
    /// Names of the grid cells, row-major.
    pub cell_names: Vec<String>,
    /// Extra position words that appear in reports but never as a cell.
    pub extra_positions: Vec<String>,
    pub entities: Vec<EntityDef>,
    /// Chance that a finding is reported as uncertain.
    pub uncertain_rate: f64,
    /// Chance that an uncertain finding is actually drawn (at half contrast).
    pub uncertain_drawn_rate: f64,
    /// Chance that a seen entity without a finding is reported absent.
    pub absent_mention_rate: f64,
    /// Chance that an absent mention names a position.
    pub absent_position_rate: f64,
    /// Chance that a present finding is reported without its position.
    pub unspecified_position_rate: f64,
    pub max_filler: usize,
    pub noise_std: f64,
}

impl WorldSpec {
    /// Default desk world: 32×32 canvas, 2×2 cells, 6 seen + 1 unseen.
    pub fn desk() -> Self {
        use Edge::*;
        use Intensity::*;
        use Size::*;
        use Texture::*;
        let e = |name: &str, intensity, size, edge, texture, seen| EntityDef {
            name: name.to_string(),
            attributes: Attributes {
                intensity,
                size,
                edge,
                texture,
            },
            seen,
            prevalence: if seen { 0.2 } else { 0.06 },
        };
        Self {
            canvas: 32,
            grid: 2,
            patch: 8,
            cell_names: vec![
                "right upper lobe".into(),
                "left upper lobe".into(),
                "right lower lobe".into(),
                "left lower lobe".into(),
            ],
            extra_positions: vec!["right apex".into(), "left apex".into()],
            entities: vec![
                e("opacity", Bright, Large, Sharp, Solid, true),
                e("nodule", Bright, Small, Sharp, Mottled, true),
                e("mass", Faint, Large, Blurred, Solid, true),
                e("effusion", Faint, Small, Blurred, Mottled, true),
                e("consolidation", Bright, Large, Blurred, Mottled, true),
                e("atelectasis", Faint, Small, Sharp, Solid, true),
                e("pneumonitis", Bright, Small, Blurred, Solid, false),
            ],
            uncertain_rate: 0.05,
            uncertain_drawn_rate: 0.5,
            absent_mention_rate: 0.6,
            absent_position_rate: 0.2,
            unspecified_position_rate: 0.1,
            max_filler: 2,
            noise_std: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::World(m));
        if self.entities.is_empty() {
            return bad("empty entity set".into());
        }
        if self.grid == 0 || !self.canvas.is_multiple_of(self.grid) {
            return bad(format!("canvas {} not divisible into {} cells", self.canvas, self.grid));
        }
        let cell = self.canvas / self.grid;
        if self.patch == 0 || !cell.is_multiple_of(self.patch) {
            return bad(format!("cell side {cell} not a multiple of patch {}", self.patch));
        }
        if self.patch < 8 {
            return bad("anchor patch must be at least 8 px".into());
        }
        if self.cell_names.len() != self.grid * self.grid {
            return bad(format!(
                "{} cell names for a {}x{} grid",
                self.cell_names.len(),
                self.grid,
                self.grid
            ));
        }
        let mut names: Vec<&str> = self.cell_names.iter().map(String::as_str).collect();
        names.extend(self.extra_positions.iter().map(String::as_str));
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != names.len() {
            return bad("overlapping position cells (duplicate names)".into());
        }
        if names.iter().any(|n| *n == UNSPECIFIED || *n == OTHER) {
            return bad("reserved position name used as a cell".into());
        }
        if !self.entities.iter().any(|e| e.seen) {
            return bad("no seen entities".into());
        }
        if self.entities.len() > self.anchors() {
            return bad(format!(
                "{} entities but only {} anchor patches",
                self.entities.len(),
                self.anchors()
            ));
        }
        for e in &self.entities {
            if !(0.0..=1.0).contains(&e.prevalence) {
                return bad(format!("prevalence of {} outside [0, 1]", e.name));
            }
        }
        for (name, p) in [
            ("uncertain_rate", self.uncertain_rate),
            ("uncertain_drawn_rate", self.uncertain_drawn_rate),
            ("absent_mention_rate", self.absent_mention_rate),
            ("absent_position_rate", self.absent_position_rate),
            ("unspecified_position_rate", self.unspecified_position_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return bad("negative noise".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("world spec serialises");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Number of anchor patches on the canvas.
    pub fn anchors(&self) -> usize {
        (self.canvas / self.patch).pow(2)
    }

    /// Grid cell containing anchor patch `a` (row-major over patches).
    pub fn cell_of_anchor(&self, a: usize) -> usize {
        let per_side = self.canvas / self.patch;
        let per_cell = per_side / self.grid;
        let (r, c) = (a / per_side, a % per_side);
        (r / per_cell) * self.grid + c / per_cell
    }

    /// Positions: cells, extras, then `other` and `unspecified`.
    pub fn position_names(&self) -> Vec<String> {
        let mut p = self.cell_names.clone();
        p.extend(self.extra_positions.iter().cloned());
        p.push(OTHER.to_string());
        p.push(UNSPECIFIED.to_string());
        p
    }

    pub fn knowledge_base(&self) -> Result<KnowledgeBase> {
        KnowledgeBase::new(
            self.position_names(),
            self.entities
                .iter()
                .map(|e| EntityEntry {
                    name: e.name.clone(),
                    description: e.attributes.description(),
                    seen: e.seen,
                })
                .collect(),
        )
    }

    pub fn grammar_file(&self) -> GrammarFile {
        let lex = |n: &String| LexiconEntry {
            name: n.clone(),
            forms: vec![n.clone()],
        };
        let mut positions: Vec<LexiconEntry> = self.cell_names.iter().map(lex).collect();
        positions.extend(self.extra_positions.iter().map(lex));
        GrammarFile {
            format: GRAMMAR_FORMAT.to_string(),
            entities: self.entities.iter().map(|e| lex(&e.name)).collect(),
            positions,
            cues: default_cues(),
            templates: default_templates(),
        }
    }

    pub fn grammar(&self, kb: &KnowledgeBase) -> Result<ReportGrammar> {
        ReportGrammar::new(self.grammar_file(), kb)
    }
}

pub fn default_cues() -> CueLists {
    let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
    CueLists {
        negation: v(&["no", "no evidence of", "without"]),
        uncertainty: v(&["possible", "may represent", "cannot exclude"]),
    }
}

pub fn default_templates() -> Templates {
    let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
    Templates {
        present: v(&["There is {entity}.", "Findings consistent with {entity}."]),
        present_at: v(&[
            "There is {entity} in the {position}.",
            "{entity} is seen in the {position}.",
        ]),
        absent: v(&[
            "No evidence of {entity}.",
            "There is no {entity}.",
            "Lungs are clear without {entity}.",
        ]),
        absent_at: v(&["No evidence of {entity} in the {position}."]),
        uncertain: v(&["Findings may represent {entity}.", "Cannot exclude {entity}."]),
        uncertain_at: v(&[
            "Possible {entity} in the {position}.",
            "Cannot exclude {entity} in the {position}.",
        ]),
        filler: v(&[
            "The technique is satisfactory.",
            "Heart size is normal.",
            "Comparison is made to the prior study.",
        ]),
    }
}

/// One drawn finding.
#[derive(Clone, Debug, PartialEq)]
pub struct Finding {
    pub entity: EntityId,
    pub cell: usize,
    pub label: ExistLabel,
    /// Whether the blob is actually in the image.
    pub drawn: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub index: usize,
    pub image: Image,
    pub report: Report,
    /// Ground truth per knowledge-base entity: blob drawn in the image.
    pub labels: Vec<bool>,
    /// Blob support per entity; `Some` iff the label is positive.
    pub masks: Vec<Option<Vec<bool>>>,
    /// Triplets the report was written from.
    pub triplets: TripletSet,
    pub findings: Vec<Finding>,
}

impl Sample {
    /// True when any unseen entity is drawn or mentioned.
    pub fn involves_unseen(&self, kb: &KnowledgeBase) -> bool {
        let unseen = |e: EntityId| kb.entity(e).is_some_and(|x| !x.seen);
        self.findings.iter().any(|f| unseen(f.entity))
            || self.triplets.iter().any(|t| unseen(t.entity))
            || self
                .labels
                .iter()
                .enumerate()
                .any(|(i, &l)| l && unseen(EntityId(i)))
    }
}

/// Draws `n` samples; sample `i` depends only on `(spec, seed, i)`.
pub fn generate_dataset(spec: &WorldSpec, n: usize, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::World("dataset size must be at least 1".into()));
    }
    spec.validate()?;
    let kb = spec.knowledge_base()?;
    let grammar = spec.grammar(&kb)?;
    (0..n)
        .map(|i| generate_sample(spec, &kb, &grammar, seed, i))
        .collect()
}

fn generate_sample(
    spec: &WorldSpec,
    kb: &KnowledgeBase,
    grammar: &ReportGrammar,
    seed: u64,
    index: usize,
) -> Result<Sample> {
    let mut rng = stream(seed, &[purpose::SAMPLE, index as u64]);
    let n_ent = spec.entities.len();

    let chosen: Vec<usize> = (0..n_ent)
        .filter(|&e| rng.random_bool(spec.entities[e].prevalence))
        .collect();
    let anchors: Vec<usize> =
        rand::seq::index::sample(&mut rng, spec.anchors(), chosen.len()).into_vec();

    let per_side = spec.canvas / spec.patch;
    let mut pixels = vec![0.0f64; spec.canvas * spec.canvas];
    let mut labels = vec![false; n_ent];
    let mut masks: Vec<Option<Vec<bool>>> = vec![None; n_ent];
    let mut findings = Vec::new();
    let mut triplets = Vec::new();

    for (&e, &anchor) in chosen.iter().zip(&anchors) {
        let def = &spec.entities[e];
        let cell = spec.cell_of_anchor(anchor);
        let label = if def.seen && rng.random_bool(spec.uncertain_rate) {
            ExistLabel::Uncertain
        } else {
            ExistLabel::Present
        };
        let drawn = match label {
            ExistLabel::Present => true,
            _ => rng.random_bool(spec.uncertain_drawn_rate),
        };
        let cy = ((anchor / per_side) * spec.patch) as f64 + rng.random_range(2.3..2.7);
        let cx = ((anchor % per_side) * spec.patch) as f64 + rng.random_range(2.3..2.7);
        if drawn {
            let contrast = if label == ExistLabel::Present { 1.0 } else { 0.5 };
            let mut mask = vec![false; spec.canvas * spec.canvas];
            for y in 0..spec.canvas {
                for x in 0..spec.canvas {
                    let d = ((y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2)).sqrt();
                    if d < def.attributes.radius() {
                        let v = contrast * def.attributes.profile(d, y, x);
                        let px = &mut pixels[y * spec.canvas + x];
                        *px = px.max(v);
                        mask[y * spec.canvas + x] = true;
                    }
                }
            }
            labels[e] = true;
            masks[e] = Some(mask);
        }
        let position = if rng.random_bool(spec.unspecified_position_rate) {
            kb.unspecified()
        } else {
            kb.position_id(&spec.cell_names[cell])
                .expect("cell names are positions")
        };
        triplets.push(Triplet {
            entity: EntityId(e),
            position,
            exist: label,
        });
        findings.push(Finding {
            entity: EntityId(e),
            cell,
            label,
            drawn,
        });
    }

    let mentionable: Vec<PositionId> = grammar.positions();
    for e in 0..n_ent {
        if chosen.contains(&e) || !spec.entities[e].seen {
            continue;
        }
        if rng.random_bool(spec.absent_mention_rate) {
            let position = if rng.random_bool(spec.absent_position_rate) {
                *mentionable.choose(&mut rng).expect("grammar has positions")
            } else {
                kb.unspecified()
            };
            triplets.push(Triplet {
                entity: EntityId(e),
                position,
                exist: ExistLabel::Absent,
            });
        }
    }

    let mut sentences = Vec::with_capacity(triplets.len() + spec.max_filler);
    for t in &triplets {
        sentences.push(grammar.emit(t, rng.random_range(0..8))?);
    }
    let fillers = rng.random_range(0..=spec.max_filler);
    for _ in 0..fillers {
        if let Some(f) = grammar.filler(rng.random_range(0..8)) {
            sentences.push(f.to_string());
        }
    }
    sentences.shuffle(&mut rng);

    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).expect("validated noise");
        for p in &mut pixels {
            *p += noise.sample(&mut rng);
        }
    }
    let image = Image::new(spec.canvas, spec.canvas, 1, pixels)?.quantized();

    Ok(Sample {
        index,
        image,
        report: Report::from_sentences(sentences),
        labels,
        masks,
        triplets: merge_triplets(triplets),
        findings,
    })
}

/// Train/val/test partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Deterministic partition of `n` sample indices.
///
/// Indices flagged in `holdout` (samples involving unseen entities) are
/// placed in the test part, so nothing unseen reaches training. Fails if
/// they do not fit.
pub fn split(n: usize, holdout: &[bool], fractions: [f64; 3], seed: u64) -> Result<Split> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!("split fractions {fractions:?} must sum to 1")));
    }
    if holdout.len() != n {
        return Err(Error::Invalid("holdout flags length mismatch".into()));
    }
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &[purpose::SPLIT]));
    let (held, free): (Vec<usize>, Vec<usize>) = order.into_iter().partition(|&i| holdout[i]);
    if free.len() < n_train + n_val {
        return Err(Error::Config(format!(
            "{} samples involve unseen entities; test split of {} cannot hold them",
            held.len(),
            n - n_train - n_val
        )));
    }
    let mut train = free[..n_train].to_vec();
    let mut val = free[n_train..n_train + n_val].to_vec();
    let mut test: Vec<usize> = free[n_train + n_val..].iter().chain(&held).copied().collect();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse_report;

    #[test]
    fn desk_spec_is_valid_and_has_zero_shot_testbed() {
        let s = WorldSpec::desk();
        s.validate().unwrap();
        let kb = s.knowledge_base().unwrap();
        assert_eq!(kb.num_queries(), 6);
        assert_eq!(kb.unseen().len(), 1);
        // the unseen bundle reuses only attribute words seen in training
        let seen_words: Vec<&str> = s
            .entities
            .iter()
            .filter(|e| e.seen)
            .flat_map(|e| e.attributes.words())
            .collect();
        for e in s.entities.iter().filter(|e| !e.seen) {
            assert!(e.attributes.words().iter().all(|w| seen_words.contains(w)));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = WorldSpec::desk();
        assert_eq!(generate_dataset(&s, 5, 9).unwrap(), generate_dataset(&s, 5, 9).unwrap());
        assert_ne!(generate_dataset(&s, 5, 9).unwrap(), generate_dataset(&s, 5, 10).unwrap());
    }

    #[test]
    fn rejects_invalid_specs() {
        let mut s = WorldSpec::desk();
        s.entities.clear();
        assert!(matches!(generate_dataset(&s, 3, 0), Err(Error::World(_))));
        let mut s = WorldSpec::desk();
        s.cell_names[1] = s.cell_names[0].clone();
        assert!(s.validate().is_err());
        assert!(generate_dataset(&WorldSpec::desk(), 0, 0).is_err());
    }

    #[test]
    fn noiseless_single_entity_mask_is_blob_support() {
        let mut s = WorldSpec::desk();
        s.entities.truncate(1);
        s.noise_std = 0.0;
        s.uncertain_rate = 0.0;
        for sample in generate_dataset(&s, 40, 3).unwrap() {
            match &sample.masks[0] {
                Some(mask) => {
                    for (p, m) in sample.image.data().iter().zip(mask) {
                        assert_eq!(*p > 0.0, *m);
                    }
                }
                None => assert!(sample.image.data().iter().all(|&p| p == 0.0)),
            }
        }
    }

    #[test]
    fn masks_cover_anchor_patch_corner() {
        let s = WorldSpec::desk();
        for sample in generate_dataset(&s, 200, 4).unwrap() {
            for (e, m) in sample.masks.iter().enumerate() {
                if let Some(m) = m {
                    assert!(sample.labels[e]);
                    // some pixel at a multiple of the patch size is inside
                    let hit = (0..s.canvas)
                        .step_by(s.patch)
                        .any(|y| (0..s.canvas).step_by(s.patch).any(|x| m[y * s.canvas + x]));
                    assert!(hit);
                } else {
                    assert!(!sample.labels[e]);
                }
            }
        }
    }

    #[test]
    fn reports_parse_back_to_provenance() {
        let s = WorldSpec::desk();
        let kb = s.knowledge_base().unwrap();
        let g = s.grammar(&kb).unwrap();
        for sample in generate_dataset(&s, 300, 5).unwrap() {
            assert_eq!(parse_report(&sample.report, &g), sample.triplets);
        }
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let sp = split(10, &[false; 10], [0.6, 0.2, 0.2], 1).unwrap();
        assert_eq!((sp.train.len(), sp.val.len(), sp.test.len()), (6, 2, 2));
        let mut all: Vec<usize> = sp.train.iter().chain(&sp.val).chain(&sp.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split(10, &[false; 10], [0.6, 0.2, 0.2], 1).unwrap(), sp);
        assert!(split(10, &[false; 10], [0.6, 0.2, 0.3], 1).is_err());
    }

    #[test]
    fn holdout_samples_land_in_test() {
        let mut flags = [false; 10];
        flags[3] = true;
        flags[7] = true;
        let sp = split(10, &flags, [0.6, 0.2, 0.2], 2).unwrap();
        assert!(sp.test.contains(&3) && sp.test.contains(&7));
        let too_many = [true; 10];
        assert!(split(10, &too_many, [0.6, 0.2, 0.2], 2).is_err());
    }
}
