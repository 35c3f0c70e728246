// SPDX-License-Identifier: Apache-2.0

mod common;

use common::*;
use entalign_core::parser::{merge_triplets, parse_report, ExistLabel, Report};
use entalign_core::world::{generate_dataset, WorldSpec};
use proptest::prelude::*;

#[test]
fn two_hundred_sentence_corpus_round_trips() {
    let o = parser_round_trip_check(200);
    assert!(o.passed, "{}", o.detail);
}

#[test]
fn whole_reports_round_trip_through_text() {
    let spec = WorldSpec::desk();
    let kb = spec.knowledge_base().unwrap();
    let g = spec.grammar(&kb).unwrap();
    let corpus = parser_corpus(&spec, 200);
    for chunk in corpus.chunks(5) {
        let report = Report::from_sentences(chunk.iter().map(|(_, s)| s));
        let back = Report::from_text(&report.to_text());
        assert_eq!(back, report);
        let want = merge_triplets(chunk.iter().map(|(t, _)| *t));
        assert_eq!(parse_report(&back, &g), want);
    }
}

#[test]
fn generated_reports_recover_provenance() {
    let spec = WorldSpec::desk();
    let kb = spec.knowledge_base().unwrap();
    let g = spec.grammar(&kb).unwrap();
    for s in generate_dataset(&spec, 300, 5).unwrap() {
        assert_eq!(parse_report(&s.report, &g), s.triplets, "sample {}", s.index);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parsing_is_idempotent(picks in prop::collection::vec(0usize..400, 0..8)) {
        let spec = WorldSpec::desk();
        let kb = spec.knowledge_base().unwrap();
        let g = spec.grammar(&kb).unwrap();
        let corpus = parser_corpus(&spec, 400);
        let report = Report::from_sentences(picks.iter().map(|&i| &corpus[i].1));
        let once = parse_report(&report, &g);
        let again = parse_report(&g.emit_report(&once).unwrap(), &g);
        prop_assert_eq!(again, once);
    }

    #[test]
    fn merged_label_has_highest_precedence(picks in prop::collection::vec(0usize..400, 1..8)) {
        let spec = WorldSpec::desk();
        let corpus = parser_corpus(&spec, 400);
        let merged = merge_triplets(picks.iter().map(|&i| corpus[i].0));
        for t in &merged {
            let best = picks
                .iter()
                .map(|&i| corpus[i].0)
                .filter(|u| u.entity == t.entity)
                .map(|u| u.exist.precedence())
                .max()
                .unwrap();
            prop_assert_eq!(t.exist.precedence(), best);
        }
        prop_assert!(merged.iter().all(|t| ExistLabel::ALL.contains(&t.exist)));
    }
}
