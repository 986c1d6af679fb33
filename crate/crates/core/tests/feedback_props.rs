mod common;

use std::collections::BTreeSet;

use cfparse_core::corpus::{generate_pairs, parse_lexicon, parse_templates, GenConfig, DEFAULT_LEXICON, DEFAULT_TEMPLATES};
use cfparse_core::feedback::*;
use cfparse_core::geo::GeoDatabase;
use cfparse_core::mrl::{linearize, LanguageTable, LinearQuery};
use StatementKind::*;

fn q(s: &str) -> LinearQuery {
    s.parse().unwrap()
}

fn check_block(query: &LinearQuery, d: &Descriptions) -> Vec<Statement> {
    let st = generate_statements(query, d).unwrap();
    let got: Vec<StatementKind> = st.iter().map(|s| s.kind).collect();
    let expected: Vec<StatementKind> = common::expected_kinds(query).into_iter().collect();
    // Sorted and unique: one statement per triggered type, in type order.
    assert_eq!(got, expected, "{query}");
    for s in &st {
        assert!(!s.tokens.is_empty() && s.tokens.iter().all(|&t| t < query.len()), "{query}");
        assert!(!s.text.is_empty());
    }
    st
}

#[test]
fn trigger_soundness_on_random_queries() {
    let table = LanguageTable::default();
    let d = Descriptions::bundled();
    let mut rng = common::rng(77);
    let mut seen = BTreeSet::new();
    let mut queries: Vec<LinearQuery> = (0..700)
        .map(|_| linearize(&table, &common::random_query_tree(&mut rng, &table)).unwrap())
        .collect();
    // Plus generator output, which is what annotators actually see.
    let lex = parse_lexicon(DEFAULT_LEXICON).unwrap();
    let t = parse_templates(DEFAULT_TEMPLATES).unwrap();
    let cfg = GenConfig {
        rounds: 20,
        ..Default::default()
    };
    let g = generate_pairs(&lex, &t, &GeoDatabase::bundled(), &cfg, 9).unwrap();
    queries.extend(g.pairs.iter().take(300).map(|p| p.query.clone()));
    assert_eq!(queries.len(), 1000);
    for query in &queries {
        seen.extend(check_block(query, &d).into_iter().map(|s| s.kind));
    }
    assert_eq!(seen.len(), 8);
}

#[test]
fn fixture_suite_reaches_all_eight_types() {
    let d = Descriptions::bundled();
    let fixtures = [
        (
            "query@3 area@1 keyval@2 name@0 Paris@s nwr@1 keyval@2 tourism@0 hotel@s qtype@1 count@0",
            vec![Town, Pois, QuestionType],
        ),
        (
            "query@2 around@4 center@2 area@1 keyval@2 name@0 Lyon@s nwr@1 keyval@2 name@0 Royal@s search@1 nwr@1 keyval@2 shop@0 bakery@s maxdist@1 DIST_INTOWN@0 topx@1 1@s qtype@1 latlong@0",
            vec![Town, ReferencePoint, Pois, QuestionType, Proximity, RestrictionClosest, Distance],
        ),
        (
            "query@2 west@2 area@1 keyval@2 name@0 Berlin@s nwr@1 keyval@2 amenity@0 pub@s qtype@1 exist@0",
            vec![Town, Pois, QuestionType, CardinalDirection],
        ),
        (
            "query@2 around@3 center@2 area@1 keyval@2 name@0 Lyon@s nwr@1 keyval@2 name@0 Royal@s search@1 nwr@1 keyval@2 shop@0 bakery@s maxdist@1 WALKING_DIST@0 qtype@1 findkey@1 website@0",
            vec![Town, ReferencePoint, Pois, QuestionType, Proximity, Distance],
        ),
    ];
    let mut seen = BTreeSet::new();
    for (text, kinds) in fixtures {
        let st = check_block(&q(text), &d);
        assert_eq!(st.iter().map(|s| s.kind).collect::<Vec<_>>(), kinds);
        seen.extend(kinds);
    }
    assert_eq!(seen, StatementKind::ALL.into_iter().collect());

    let st = generate_statements(&q(fixtures_closest()), &d).unwrap();
    let text = |k: StatementKind| st.iter().find(|s| s.kind == k).unwrap().text.clone();
    assert_eq!(text(Town), "Lyon");
    assert_eq!(text(ReferencePoint), "Royal");
    assert_eq!(text(Pois), "shop=bakery");
    assert_eq!(text(QuestionType), "location");
    assert_eq!(text(RestrictionClosest), "closest");
    assert_eq!(text(Distance), "within town");
    // Spans: Town covers keyval(name, Lyon) at 4..7, Proximity the around token.
    assert_eq!(st[0].tokens, vec![4, 5, 6]);
    assert_eq!(st.iter().find(|s| s.kind == Proximity).unwrap().tokens, vec![1]);
    assert_eq!(st.iter().find(|s| s.kind == RestrictionClosest).unwrap().tokens, vec![18, 19]);
}

fn fixtures_closest() -> &'static str {
    "query@2 around@4 center@2 area@1 keyval@2 name@0 Lyon@s nwr@1 keyval@2 name@0 Royal@s search@1 nwr@1 keyval@2 shop@0 bakery@s maxdist@1 DIST_INTOWN@0 topx@1 1@s qtype@1 latlong@0"
}

fn block(text: &str) -> StatementBlock {
    StatementBlock::new("question", &q(text), &Descriptions::bundled()).unwrap()
}

fn record(judgments: Vec<Judgment>) -> FeedbackRecord {
    FeedbackRecord {
        judgments,
        elapsed_secs: 3.0,
        annotator: "t".into(),
    }
}

#[test]
fn feedback_mapping_fixtures() {
    use Judgment::{No, Yes};
    let b = block(fixtures_closest());
    let n = b.query.len();
    assert_eq!(b.statements.len(), 7);

    let (tok, seq) = map_feedback_to_tokens(&b, &record(vec![Yes; 7])).unwrap();
    assert_eq!((tok, seq), (vec![1.0; n], 1.0));

    // All No: every covered token is zero, uncovered structure stays one.
    let (tok, seq) = map_feedback_to_tokens(&b, &record(vec![No; 7])).unwrap();
    assert_eq!(seq, 0.0);
    let covered: BTreeSet<usize> = b.statements.iter().flat_map(|s| s.tokens.clone()).collect();
    for (i, r) in tok.iter().enumerate() {
        assert_eq!(*r, if covered.contains(&i) { 0.0 } else { 1.0 }, "token {i}");
    }
    // query, center, area, nwr (twice), search, maxdist and qtype carry no statement.
    assert_eq!(tok.iter().filter(|r| **r == 1.0).count(), 8);

    // Mixed: only the Distance statement is rejected.
    let mut j = vec![Yes; 7];
    j[6] = No;
    let (tok, seq) = map_feedback_to_tokens(&b, &record(j)).unwrap();
    assert_eq!(seq, 0.0);
    let zeros: Vec<usize> = (0..n).filter(|&i| tok[i] == 0.0).collect();
    assert_eq!(zeros, vec![17]);
}

#[test]
fn overlapping_statements_no_wins() {
    use Judgment::{No, Yes};
    // Token 7 (`tourism`) is covered by both POI(s) and, by hand, Question
    // Type; it must end at zero whichever of the two says No.
    let mut b = block("query@3 area@1 keyval@2 name@0 Paris@s nwr@1 keyval@2 tourism@0 hotel@s qtype@1 count@0");
    b.statements[2].tokens.push(7);
    for (j, expect) in [(vec![Yes, No, Yes], 0.0), (vec![Yes, Yes, No], 0.0), (vec![Yes, Yes, Yes], 1.0)] {
        let (tok, _) = map_feedback_to_tokens(&b, &record(j)).unwrap();
        assert_eq!(tok[7], expect);
    }
}

#[test]
fn invalid_records_are_rejected() {
    let b = block(fixtures_closest());
    assert!(matches!(
        map_feedback_to_tokens(&b, &record(vec![Judgment::Yes; 6])),
        Err(FeedbackError::IncompleteJudgments { expected: 7, got: 6 })
    ));
    let mut r = record(vec![Judgment::Yes; 7]);
    r.elapsed_secs = -1.0;
    assert!(map_feedback_to_tokens(&b, &r).is_err());
}

#[test]
fn every_lexicon_tag_and_question_key_has_a_tooltip() {
    let d = Descriptions::bundled();
    for e in parse_lexicon(DEFAULT_LEXICON).unwrap() {
        assert!(!d.tooltip_lookup(&e.key, Some(&e.value)).is_empty(), "{}={}", e.key, e.value);
    }
    let t = parse_templates(DEFAULT_TEMPLATES).unwrap();
    let g = generate_pairs(&parse_lexicon(DEFAULT_LEXICON).unwrap(), &t, &GeoDatabase::bundled(), &GenConfig::default(), 1).unwrap();
    for p in &g.pairs {
        for s in generate_statements(&p.query, &d).unwrap() {
            if s.kind == Pois {
                assert!(s.tooltip.is_some(), "{}", p.query);
            }
        }
    }
}
