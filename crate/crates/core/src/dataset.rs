// SPDX-License-Identifier: Apache-2.0

//! Datasets on disk.
//!
//! ```text
//! manifest.toml      format, sample count, seed, world hash
//! world.toml         the world spec
//! images/NNNNN.pgm   binary graymaps
//! reports/NNNNN.txt  one sentence per line
//! truth.tsv          tab-separated records, see below
//! split.tsv          "<train|val|test>\t<index>"
//! ```
//!
//! Truth records, one per line, keyed by sample index:
//!
//! ```text
//! label    <i> <entity> <0|1>
//! mask     <i> <entity> <start:len,...>     run-length over row-major pixels
//! triplet  <i> <entity> <position> <present|absent|uncertain>
//! finding  <i> <entity> <cell> <label> <0|1 drawn>
//! ```

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::kb::{EntityId, KnowledgeBase};
use crate::parser::{ExistLabel, Report, Triplet};
use crate::world::{Finding, Sample, Split, WorldSpec};

pub const DATASET_FORMAT: &str = "entalign-dataset/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub samples: usize,
    pub seed: u64,
    pub spec_hash: String,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub spec: WorldSpec,
    pub samples: Vec<Sample>,
    pub split: Split,
}

fn label_word(l: ExistLabel) -> &'static str {
    match l {
        ExistLabel::Present => "present",
        ExistLabel::Absent => "absent",
        ExistLabel::Uncertain => "uncertain",
    }
}

fn parse_label(s: &str) -> Result<ExistLabel> {
    match s {
        "present" => Ok(ExistLabel::Present),
        "absent" => Ok(ExistLabel::Absent),
        "uncertain" => Ok(ExistLabel::Uncertain),
        _ => Err(Error::format("truth record", format!("unknown label {s:?}"))),
    }
}

/// `start:len` runs of `true`.
pub fn rle_encode(mask: &[bool]) -> String {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < mask.len() {
        if mask[i] {
            let start = i;
            while i < mask.len() && mask[i] {
                i += 1;
            }
            runs.push(format!("{start}:{}", i - start));
        } else {
            i += 1;
        }
    }
    runs.join(",")
}

pub fn rle_decode(text: &str, len: usize) -> Result<Vec<bool>> {
    let mut mask = vec![false; len];
    for run in text.split(',').filter(|r| !r.is_empty()) {
        let bad = || Error::format("mask run", run.to_string());
        let (a, b) = run.split_once(':').ok_or_else(bad)?;
        let start: usize = a.parse().map_err(|_| bad())?;
        let n: usize = b.parse().map_err(|_| bad())?;
        if start.checked_add(n).is_none_or(|end| end > len) {
            return Err(bad());
        }
        mask[start..start + n].fill(true);
    }
    Ok(mask)
}

fn entity_name(kb: &KnowledgeBase, e: EntityId) -> Result<&str> {
    kb.entity(e)
        .map(|x| x.name.as_str())
        .ok_or_else(|| Error::UnknownEntity(format!("#{}", e.0)))
}

fn truth_lines(s: &Sample, kb: &KnowledgeBase, out: &mut String) -> Result<()> {
    let i = s.index;
    for (e, &l) in s.labels.iter().enumerate() {
        writeln!(out, "label\t{i}\t{}\t{}", entity_name(kb, EntityId(e))?, l as u8).expect("string");
    }
    for (e, m) in s.masks.iter().enumerate() {
        if let Some(m) = m {
            writeln!(out, "mask\t{i}\t{}\t{}", entity_name(kb, EntityId(e))?, rle_encode(m)).expect("string");
        }
    }
    for t in &s.triplets {
        let pos = kb
            .position_name(t.position)
            .ok_or_else(|| Error::UnknownPosition(format!("#{}", t.position.0)))?;
        writeln!(out, "triplet\t{i}\t{}\t{pos}\t{}", entity_name(kb, t.entity)?, label_word(t.exist)).expect("string");
    }
    for f in &s.findings {
        writeln!(
            out,
            "finding\t{i}\t{}\t{}\t{}\t{}",
            entity_name(kb, f.entity)?,
            f.cell,
            label_word(f.label),
            f.drawn as u8
        )
        .expect("string");
    }
    Ok(())
}

fn file_name(i: usize, ext: &str) -> String {
    format!("{i:05}.{ext}")
}

/// Writes `samples` and `split` under `dir`, creating it.
pub fn save(dir: &Path, spec: &WorldSpec, seed: u64, samples: &[Sample], split: &Split) -> Result<Manifest> {
    let kb = spec.knowledge_base()?;
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("reports"))?;
    let mut truth = String::new();
    for s in samples {
        s.image.save_pgm(&dir.join("images").join(file_name(s.index, "pgm")))?;
        std::fs::write(dir.join("reports").join(file_name(s.index, "txt")), s.report.to_text())?;
        truth_lines(s, &kb, &mut truth)?;
    }
    std::fs::write(dir.join("truth.tsv"), truth)?;
    let mut sp = String::new();
    for (name, idx) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        for i in idx {
            writeln!(sp, "{name}\t{i}").expect("string");
        }
    }
    std::fs::write(dir.join("split.tsv"), sp)?;
    std::fs::write(dir.join("world.toml"), toml::to_string(spec).expect("spec serialises"))?;
    let manifest = Manifest {
        format: DATASET_FORMAT.to_string(),
        samples: samples.len(),
        seed,
        spec_hash: spec.hash(),
    };
    std::fs::write(dir.join("manifest.toml"), toml::to_string(&manifest).expect("manifest serialises"))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(dir.join("manifest.toml"))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))?;
    if m.format != DATASET_FORMAT {
        return Err(Error::format("manifest", format!("unsupported format {:?}", m.format)));
    }
    Ok(m)
}

/// Reads a dataset and checks the manifest hash against the stored spec.
pub fn load(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let spec: WorldSpec = toml::from_str(&std::fs::read_to_string(dir.join("world.toml"))?)
        .map_err(|e| Error::format("world spec", e.to_string()))?;
    if spec.hash() != manifest.spec_hash {
        return Err(Error::format("manifest", "spec hash does not match world.toml"));
    }
    spec.validate()?;
    let kb = spec.knowledge_base()?;
    let n = manifest.samples;
    let pixels = spec.canvas * spec.canvas;
    let ne = kb.entities.len();
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let image = Image::load_pgm(&dir.join("images").join(file_name(i, "pgm")))?;
        let report = Report::from_text(&std::fs::read_to_string(dir.join("reports").join(file_name(i, "txt")))?);
        samples.push(Sample {
            index: i,
            image,
            report,
            labels: vec![false; ne],
            masks: vec![None; ne],
            triplets: Vec::new(),
            findings: Vec::new(),
        });
    }
    let truth = std::fs::read_to_string(dir.join("truth.tsv"))?;
    for line in truth.lines().filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::format("truth record", line.to_string());
        if f.len() < 4 {
            return Err(bad());
        }
        let i: usize = f[1].parse().map_err(|_| bad())?;
        let s = samples.get_mut(i).ok_or_else(bad)?;
        let e = kb.entity_id(f[2]).ok_or_else(|| Error::UnknownEntity(f[2].to_string()))?;
        match (f[0], f.len()) {
            ("label", 4) => s.labels[e.0] = f[3] == "1",
            ("mask", 4) => s.masks[e.0] = Some(rle_decode(f[3], pixels)?),
            ("triplet", 5) => s.triplets.push(Triplet {
                entity: e,
                position: kb.position_id(f[3]).ok_or_else(|| Error::UnknownPosition(f[3].to_string()))?,
                exist: parse_label(f[4])?,
            }),
            ("finding", 6) => s.findings.push(Finding {
                entity: e,
                cell: f[3].parse().map_err(|_| bad())?,
                label: parse_label(f[4])?,
                drawn: f[5] == "1",
            }),
            _ => return Err(bad()),
        }
    }
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for line in std::fs::read_to_string(dir.join("split.tsv"))?.lines().filter(|l| !l.is_empty()) {
        let bad = || Error::format("split record", line.to_string());
        let (name, idx) = line.split_once('\t').ok_or_else(bad)?;
        let idx: usize = idx.parse().map_err(|_| bad())?;
        if idx >= n {
            return Err(bad());
        }
        match name {
            "train" => split.train.push(idx),
            "val" => split.val.push(idx),
            "test" => split.test.push(idx),
            _ => return Err(bad()),
        }
    }
    Ok(Dataset {
        manifest,
        spec,
        samples,
        split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_dataset, split};

    #[test]
    fn rle_round_trip() {
        let m = vec![true, true, false, true, false, false, true];
        assert_eq!(rle_encode(&m), "0:2,3:1,6:1");
        assert_eq!(rle_decode(&rle_encode(&m), 7).unwrap(), m);
        assert_eq!(rle_decode("", 3).unwrap(), vec![false; 3]);
        assert!(rle_decode("2:5", 3).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let spec = WorldSpec::desk();
        let samples = generate_dataset(&spec, 12, 5).unwrap();
        let kb = spec.knowledge_base().unwrap();
        let hold: Vec<bool> = samples.iter().map(|s| s.involves_unseen(&kb)).collect();
        let sp = split(12, &hold, [0.5, 0.25, 0.25], 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = save(dir.path(), &spec, 5, &samples, &sp).unwrap();
        assert_eq!(m.spec_hash, spec.hash());
        let ds = load(dir.path()).unwrap();
        assert_eq!(ds.samples, samples);
        assert_eq!(ds.split, sp);
        assert_eq!(ds.manifest, m);
    }

    #[test]
    fn tampered_spec_is_rejected() {
        let spec = WorldSpec::desk();
        let samples = generate_dataset(&spec, 2, 0).unwrap();
        let sp = split(2, &[false, false], [0.5, 0.0, 0.5], 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &spec, 0, &samples, &sp).unwrap();
        let mut other = spec.clone();
        other.noise_std = 0.5;
        std::fs::write(dir.path().join("world.toml"), toml::to_string(&other).unwrap()).unwrap();
        assert!(load(dir.path()).is_err());
    }
}
