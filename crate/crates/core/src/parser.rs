// SPDX-License-Identifier: Apache-2.0

//! Rule-based triplet extraction over a controlled report grammar.
//!
//! A sentence is tokenised, then scanned left to right for the longest
//! matching lexeme (entity form, position form, negation cue or
//! uncertainty cue). Each entity mention becomes one triplet per position
//! mentioned between it and the next entity mention, or a single
//! `unspecified` triplet when there is none. An uncertainty cue anywhere
//! earlier in the sentence makes the mention `Uncertain`; otherwise a
//! negation cue makes it `Absent`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::{tokenize, EntityId, KnowledgeBase, PositionId};

pub const GRAMMAR_FORMAT: &str = "entalign-grammar/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ExistLabel {
    Present,
    Absent,
    Uncertain,
}

impl ExistLabel {
    pub const ALL: [ExistLabel; 3] = [ExistLabel::Present, ExistLabel::Absent, ExistLabel::Uncertain];

    /// Exist token: 1 present, 0 absent, -1 uncertain.
    pub fn token(self) -> i8 {
        match self {
            ExistLabel::Present => 1,
            ExistLabel::Absent => 0,
            ExistLabel::Uncertain => -1,
        }
    }

    /// Merge precedence: Present > Absent > Uncertain.
    pub fn precedence(self) -> u8 {
        match self {
            ExistLabel::Present => 2,
            ExistLabel::Absent => 1,
            ExistLabel::Uncertain => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub entity: EntityId,
    pub position: PositionId,
    pub exist: ExistLabel,
}

/// Sentences of one report, trimmed, stripped of their final punctuation
/// and non-empty.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Report {
    sentences: Vec<String>,
}

impl Report {
    pub fn from_sentences<I, S>(sentences: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            sentences: sentences
                .into_iter()
                .map(|s| s.as_ref().trim().trim_end_matches(['.', '!', '?']).trim().to_string())
                .filter(|s| !s.is_empty())
                .collect(),
        }
    }

    /// Splits free text on `.`, `!` and `?`.
    pub fn from_text(text: &str) -> Self {
        Self::from_sentences(text.split(['.', '!', '?']))
    }

    pub fn sentences(&self) -> &[String] {
        &self.sentences
    }

    /// Sentences joined back into report text, one per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            out.push_str(s);
            out.push_str(".\n");
        }
        out
    }
}

/// Deduplicated triplets ordered by (entity, position).
pub type TripletSet = Vec<Triplet>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LexiconEntry {
    /// Knowledge-base name this entry resolves to.
    pub name: String,
    /// Surface forms; the first is used when emitting.
    pub forms: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CueLists {
    pub negation: Vec<String>,
    pub uncertainty: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Templates {
    pub present: Vec<String>,
    pub present_at: Vec<String>,
    pub absent: Vec<String>,
    pub absent_at: Vec<String>,
    pub uncertain: Vec<String>,
    pub uncertain_at: Vec<String>,
    /// Sentences carrying no finding.
    pub filler: Vec<String>,
}

impl Templates {
    pub fn for_label(&self, label: ExistLabel, with_position: bool) -> &[String] {
        match (label, with_position) {
            (ExistLabel::Present, false) => &self.present,
            (ExistLabel::Present, true) => &self.present_at,
            (ExistLabel::Absent, false) => &self.absent,
            (ExistLabel::Absent, true) => &self.absent_at,
            (ExistLabel::Uncertain, false) => &self.uncertain,
            (ExistLabel::Uncertain, true) => &self.uncertain_at,
        }
    }
}

/// On-disk grammar definition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrammarFile {
    pub format: String,
    pub entities: Vec<LexiconEntry>,
    pub positions: Vec<LexiconEntry>,
    pub cues: CueLists,
    pub templates: Templates,
}

impl GrammarFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        let g: Self = toml::from_str(text).map_err(|e| Error::Grammar(e.to_string()))?;
        if g.format != GRAMMAR_FORMAT {
            return Err(Error::Grammar(format!(
                "format tag {:?}, expected {GRAMMAR_FORMAT:?}",
                g.format
            )));
        }
        Ok(g)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("grammar serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Lexeme {
    Entity(EntityId),
    Position(PositionId),
    Negation,
    Uncertainty,
}

/// Tally of sentences that produced no triplet.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParseStats {
    pub sentences: usize,
    pub empty: usize,
}

/// A grammar resolved against a knowledge base.
#[derive(Clone, Debug)]
pub struct ReportGrammar {
    file: GrammarFile,
    /// Token sequences, longest first.
    lexemes: Vec<(Vec<String>, Lexeme)>,
    entity_form: HashMap<EntityId, String>,
    position_form: HashMap<PositionId, String>,
    unspecified: PositionId,
}

impl ReportGrammar {
    /// Resolves names against `kb` and checks that every lexeme is
    /// unambiguous and every template parses back to its own triplet.
    pub fn new(file: GrammarFile, kb: &KnowledgeBase) -> Result<Self> {
        let mut by_tokens: BTreeMap<Vec<String>, Lexeme> = BTreeMap::new();
        let mut add = |form: &str, lex: Lexeme| -> Result<()> {
            let toks = tokenize(form);
            if toks.is_empty() {
                return Err(Error::Grammar(format!("empty surface form {form:?}")));
            }
            match by_tokens.insert(toks, lex) {
                Some(prev) if prev != lex => Err(Error::Grammar(format!(
                    "surface form {form:?} is ambiguous"
                ))),
                _ => Ok(()),
            }
        };
        let mut entity_form = HashMap::new();
        for e in &file.entities {
            let id = kb
                .entity_id(&e.name)
                .ok_or_else(|| Error::Grammar(format!("entity {:?} not in knowledge base", e.name)))?;
            let first = e
                .forms
                .first()
                .ok_or_else(|| Error::Grammar(format!("entity {:?} has no forms", e.name)))?;
            entity_form.insert(id, first.clone());
            for f in &e.forms {
                add(f, Lexeme::Entity(id))?;
            }
        }
        let mut position_form = HashMap::new();
        for p in &file.positions {
            let id = kb
                .position_id(&p.name)
                .ok_or_else(|| Error::Grammar(format!("position {:?} not in knowledge base", p.name)))?;
            if id == kb.unspecified() {
                return Err(Error::Grammar("the unspecified position has no surface form".into()));
            }
            let first = p
                .forms
                .first()
                .ok_or_else(|| Error::Grammar(format!("position {:?} has no forms", p.name)))?;
            position_form.insert(id, first.clone());
            for f in &p.forms {
                add(f, Lexeme::Position(id))?;
            }
        }
        for c in &file.cues.negation {
            add(c, Lexeme::Negation)?;
        }
        for c in &file.cues.uncertainty {
            add(c, Lexeme::Uncertainty)?;
        }
        let mut lexemes: Vec<(Vec<String>, Lexeme)> = by_tokens.into_iter().collect();
        lexemes.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        let grammar = Self {
            file,
            lexemes,
            entity_form,
            position_form,
            unspecified: kb.unspecified(),
        };
        grammar.check_templates()?;
        Ok(grammar)
    }

    pub fn file(&self) -> &GrammarFile {
        &self.file
    }

    pub fn unspecified(&self) -> PositionId {
        self.unspecified
    }

    pub fn entities(&self) -> Vec<EntityId> {
        let mut v: Vec<EntityId> = self.entity_form.keys().copied().collect();
        v.sort();
        v
    }

    /// Positions that have a surface form (everything but `unspecified`).
    pub fn positions(&self) -> Vec<PositionId> {
        let mut v: Vec<PositionId> = self.position_form.keys().copied().collect();
        v.sort();
        v
    }

    fn check_templates(&self) -> Result<()> {
        let t = &self.file.templates;
        for (name, list, slots) in [
            ("present", &t.present, 1),
            ("present_at", &t.present_at, 2),
            ("absent", &t.absent, 1),
            ("absent_at", &t.absent_at, 2),
            ("uncertain", &t.uncertain, 1),
            ("uncertain_at", &t.uncertain_at, 2),
        ] {
            if list.is_empty() {
                return Err(Error::Grammar(format!("no {name} templates")));
            }
            for tpl in list {
                let ok = tpl.matches("{entity}").count() == 1
                    && tpl.matches("{position}").count() == slots - 1;
                if !ok {
                    return Err(Error::Grammar(format!("template {tpl:?} has wrong slots")));
                }
            }
        }
        for f in &t.filler {
            if !self.extract(f).is_empty() {
                return Err(Error::Grammar(format!("filler {f:?} mentions a lexicon entity")));
            }
        }
        // every template must invert exactly for every lexicon entry
        for &e in self.entity_form.keys() {
            for label in ExistLabel::ALL {
                let mut cases = vec![self.unspecified];
                cases.extend(self.position_form.keys().copied());
                for position in cases {
                    let trip = Triplet {
                        entity: e,
                        position,
                        exist: label,
                    };
                    let n = t.for_label(label, position != self.unspecified).len();
                    for variant in 0..n {
                        let s = self.emit(&trip, variant)?;
                        if self.extract(&s) != vec![trip] {
                            return Err(Error::Grammar(format!(
                                "template output {s:?} does not parse back to {trip:?}"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn scan(&self, sentence: &str) -> Vec<Lexeme> {
        let toks = tokenize(sentence);
        let mut out = Vec::new();
        let mut i = 0;
        while i < toks.len() {
            let hit = self
                .lexemes
                .iter()
                .find(|(seq, _)| toks[i..].starts_with(seq));
            match hit {
                Some((seq, lex)) => {
                    out.push(*lex);
                    i += seq.len();
                }
                None => i += 1,
            }
        }
        out
    }

    /// Triplets of one sentence, in mention order.
    pub fn extract(&self, sentence: &str) -> Vec<Triplet> {
        let lex = self.scan(sentence);
        let mut out = Vec::new();
        let (mut negated, mut uncertain) = (false, false);
        for (i, l) in lex.iter().enumerate() {
            match *l {
                Lexeme::Negation => negated = true,
                Lexeme::Uncertainty => uncertain = true,
                Lexeme::Position(_) => {}
                Lexeme::Entity(entity) => {
                    let exist = if uncertain {
                        ExistLabel::Uncertain
                    } else if negated {
                        ExistLabel::Absent
                    } else {
                        ExistLabel::Present
                    };
                    let positions: Vec<PositionId> = lex[i + 1..]
                        .iter()
                        .take_while(|l| !matches!(l, Lexeme::Entity(_)))
                        .filter_map(|l| match l {
                            Lexeme::Position(p) => Some(*p),
                            _ => None,
                        })
                        .collect();
                    if positions.is_empty() {
                        out.push(Triplet {
                            entity,
                            position: self.unspecified,
                            exist,
                        });
                    }
                    for position in positions {
                        out.push(Triplet {
                            entity,
                            position,
                            exist,
                        });
                    }
                }
            }
        }
        out
    }

    /// Renders one triplet with template number `variant` (taken modulo the
    /// number of templates for its label).
    pub fn emit(&self, t: &Triplet, variant: usize) -> Result<String> {
        let with_pos = t.position != self.unspecified;
        let list = self.file.templates.for_label(t.exist, with_pos);
        let tpl = &list[variant % list.len()];
        let ent = self
            .entity_form
            .get(&t.entity)
            .ok_or_else(|| Error::UnknownEntity(format!("#{}", t.entity.0)))?;
        let mut s = tpl.replace("{entity}", ent);
        if with_pos {
            let pos = self
                .position_form
                .get(&t.position)
                .ok_or_else(|| Error::UnknownPosition(format!("#{}", t.position.0)))?;
            s = s.replace("{position}", pos);
        }
        Ok(capitalize(&s))
    }

    pub fn filler(&self, variant: usize) -> Option<&str> {
        let f = &self.file.templates.filler;
        (!f.is_empty()).then(|| f[variant % f.len()].as_str())
    }

    /// One sentence per triplet, using template variant 0.
    pub fn emit_report(&self, triplets: &[Triplet]) -> Result<Report> {
        let sentences = triplets
            .iter()
            .map(|t| self.emit(t, 0))
            .collect::<Result<Vec<_>>>()?;
        Ok(Report::from_sentences(sentences))
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Triplets of a single sentence.
pub fn extract_triplets(sentence: &str, grammar: &ReportGrammar) -> Vec<Triplet> {
    grammar.extract(sentence)
}

/// Per-entity merge: the highest-precedence label wins and keeps its
/// position; ties between positions go to the lowest id.
pub fn merge_triplets(all: impl IntoIterator<Item = Triplet>) -> TripletSet {
    let mut best: BTreeMap<EntityId, Triplet> = BTreeMap::new();
    for t in all {
        best.entry(t.entity)
            .and_modify(|cur| {
                let better = t.exist.precedence() > cur.exist.precedence()
                    || (t.exist == cur.exist && t.position < cur.position);
                if better {
                    *cur = t;
                }
            })
            .or_insert(t);
    }
    let mut out: TripletSet = best.into_values().collect();
    out.sort_by_key(|t| (t.entity, t.position));
    out
}

pub fn parse_report(report: &Report, grammar: &ReportGrammar) -> TripletSet {
    parse_report_with_stats(report, grammar, &mut ParseStats::default())
}

pub fn parse_report_with_stats(
    report: &Report,
    grammar: &ReportGrammar,
    stats: &mut ParseStats,
) -> TripletSet {
    let mut all = Vec::new();
    for s in report.sentences() {
        let t = grammar.extract(s);
        stats.sentences += 1;
        if t.is_empty() {
            stats.empty += 1;
        }
        all.extend(t);
    }
    merge_triplets(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::{EntityEntry, OTHER, UNSPECIFIED};

    fn kb() -> KnowledgeBase {
        let entity = |n: &str| EntityEntry {
            name: n.into(),
            description: format!("{n} finding"),
            seen: true,
        };
        KnowledgeBase::new(
            vec![
                "right lower lobe".into(),
                "left apex".into(),
                OTHER.into(),
                UNSPECIFIED.into(),
            ],
            vec![entity("opacity"), entity("collapse")],
        )
        .unwrap()
    }

    pub(crate) fn grammar_file() -> GrammarFile {
        let lex = |n: &str, forms: &[&str]| LexiconEntry {
            name: n.into(),
            forms: forms.iter().map(|s| s.to_string()).collect(),
        };
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        GrammarFile {
            format: GRAMMAR_FORMAT.into(),
            entities: vec![lex("opacity", &["opacity", "opacities"]), lex("collapse", &["collapse"])],
            positions: vec![
                lex("right lower lobe", &["right lower lobe"]),
                lex("left apex", &["left apex"]),
            ],
            cues: CueLists {
                negation: v(&["no", "no evidence of", "without"]),
                uncertainty: v(&["possible", "may represent", "cannot exclude"]),
            },
            templates: Templates {
                present: v(&["There is {entity}."]),
                present_at: v(&["There is {entity} in the {position}."]),
                absent: v(&["No evidence of {entity}.", "There is no {entity}."]),
                absent_at: v(&["No evidence of {entity} in the {position}."]),
                uncertain: v(&["Findings may represent {entity}.", "Cannot exclude {entity}."]),
                uncertain_at: v(&["Possible {entity} in the {position}."]),
                filler: v(&["The technique is satisfactory."]),
            },
        }
    }

    fn grammar() -> (KnowledgeBase, ReportGrammar) {
        let kb = kb();
        let g = ReportGrammar::new(grammar_file(), &kb).unwrap();
        (kb, g)
    }

    #[test]
    fn worked_example_present_with_position() {
        let (kb, g) = grammar();
        let t = extract_triplets("There is opacity in the right lower lobe.", &g);
        assert_eq!(
            t,
            vec![Triplet {
                entity: kb.entity_id("opacity").unwrap(),
                position: kb.position_id("right lower lobe").unwrap(),
                exist: ExistLabel::Present,
            }]
        );
    }

    #[test]
    fn no_lexicon_hit_gives_nothing() {
        let (_, g) = grammar();
        assert!(extract_triplets("The technique is satisfactory.", &g).is_empty());
        let mut stats = ParseStats::default();
        let r = Report::from_text("The technique is satisfactory. Heart is fine.");
        assert!(parse_report_with_stats(&r, &g, &mut stats).is_empty());
        assert_eq!(stats, ParseStats { sentences: 2, empty: 2 });
    }

    #[test]
    fn negated_mention_keeps_its_position() {
        let (kb, g) = grammar();
        let t = extract_triplets("No evidence of collapse in the left apex.", &g);
        assert_eq!(
            t,
            vec![Triplet {
                entity: kb.entity_id("collapse").unwrap(),
                position: kb.position_id("left apex").unwrap(),
                exist: ExistLabel::Absent,
            }]
        );
    }

    #[test]
    fn uncertainty_cues_and_synonyms() {
        let (kb, g) = grammar();
        let t = extract_triplets("Findings may represent opacities", &g);
        assert_eq!(t[0].exist, ExistLabel::Uncertain);
        assert_eq!(t[0].position, kb.unspecified());
        assert_eq!(t[0].entity, kb.entity_id("opacity").unwrap());
    }

    #[test]
    fn multiple_positions_give_one_triplet_each() {
        let (kb, g) = grammar();
        let t = extract_triplets("There is opacity in the right lower lobe and left apex", &g);
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].position, kb.position_id("right lower lobe").unwrap());
        assert_eq!(t[1].position, kb.position_id("left apex").unwrap());
    }

    #[test]
    fn exist_tokens() {
        assert_eq!(ExistLabel::Present.token(), 1);
        assert_eq!(ExistLabel::Absent.token(), 0);
        assert_eq!(ExistLabel::Uncertain.token(), -1);
    }

    #[test]
    fn report_sorted_by_entity_then_position() {
        let (kb, g) = grammar();
        let r = Report::from_text("There is collapse. There is opacity in the left apex.");
        let t = parse_report(&r, &g);
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].entity, kb.entity_id("opacity").unwrap());
        assert_eq!(t[1].entity, kb.entity_id("collapse").unwrap());
        assert!(parse_report(&Report::default(), &g).is_empty());
    }

    #[test]
    fn merge_rule_over_all_label_pairs() {
        // Oracle: enumerate every ordered pair of labels with distinct
        // positions and check the winner against the precedence table.
        let (kb, _) = grammar();
        let e = kb.entity_id("opacity").unwrap();
        let (pa, pb) = (PositionId(0), PositionId(1));
        let rank = |l: ExistLabel| match l {
            ExistLabel::Present => 3,
            ExistLabel::Absent => 2,
            ExistLabel::Uncertain => 1,
        };
        for la in ExistLabel::ALL {
            for lb in ExistLabel::ALL {
                let a = Triplet { entity: e, position: pa, exist: la };
                let b = Triplet { entity: e, position: pb, exist: lb };
                let expect = if rank(la) > rank(lb) {
                    a
                } else if rank(lb) > rank(la) {
                    b
                } else {
                    a // equal labels: lower position id
                };
                assert_eq!(merge_triplets([a, b]), vec![expect], "{la:?} {lb:?}");
                assert_eq!(merge_triplets([b, a]), vec![expect], "{lb:?} {la:?}");
            }
        }
        let r = Report::from_text(
            "There is opacity in the right lower lobe. Findings may represent opacity.",
        );
        let (_, g) = grammar();
        let t = parse_report(&r, &g);
        assert_eq!(t, vec![Triplet { entity: e, position: pa, exist: ExistLabel::Present }]);
    }

    #[test]
    fn ambiguous_surface_forms_rejected() {
        let kb = kb();
        let mut f = grammar_file();
        f.entities[1].forms.push("opacity".into());
        assert!(matches!(ReportGrammar::new(f, &kb), Err(Error::Grammar(_))));
    }

    #[test]
    fn non_inverting_template_rejected() {
        let kb = kb();
        let mut f = grammar_file();
        f.templates.present.push("Cannot see {entity}.".into());
        // "cannot see" is not a cue, so this still parses as present
        assert!(ReportGrammar::new(f.clone(), &kb).is_ok());
        f.templates.present.push("Possible {entity}.".into());
        assert!(matches!(ReportGrammar::new(f, &kb), Err(Error::Grammar(_))));
    }

    #[test]
    fn grammar_file_toml_round_trip() {
        let f = grammar_file();
        assert_eq!(GrammarFile::from_toml(&f.to_toml()).unwrap(), f);
        let mut bad = f;
        bad.format = "other/9".into();
        assert!(GrammarFile::from_toml(&bad.to_toml()).is_err());
    }

    #[test]
    fn report_text_round_trip() {
        let r = Report::from_sentences(["There is opacity", "No evidence of collapse."]);
        assert_eq!(Report::from_text(&r.to_text()), r);
    }
}
